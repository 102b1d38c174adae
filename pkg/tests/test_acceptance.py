"""The twelve acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL`` line and records it for
the terminal summary, then asserts.
"""

import dataclasses
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
from conftest import ACCEPTANCE

from mmdrestore import degradation as deg
from mmdrestore import experiments as exp
from mmdrestore.cli import main as cli_main
from mmdrestore.core import (
    derive_seed,
    finite_difference_gradient,
    from_levels,
    load_image,
    make_rng,
    quantize,
    relative_error,
    save_image,
)
from mmdrestore.datasets import AddNoise, addnoise_entropy_bits, make_toy_dataset
from mmdrestore.mmd import MmdConfig, mmd2, mmd2_grad
from mmdrestore.prior import map_latent, sample_prior_bank, synthesize, synthesize_vjp
from mmdrestore.restore import RestoreConfig, cross_loss, cross_loss_grad, downscale, restore, restore_sr, total_objective


def record(num, ok, detail):
    ACCEPTANCE.append((num, bool(ok), detail))
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def naive_mmd2(x, y, gamma):
    """Triple loop: pairs, then coordinates."""

    def kmean(a, b):
        total = 0.0
        for i in range(len(a)):
            for j in range(len(b)):
                sq = 0.0
                for t in range(len(a[i])):
                    sq += (a[i][t] - b[j][t]) ** 2
                total += math.exp(-math.sqrt(sq) / gamma)
        return total / (len(a) * len(b))

    return kmean(x, x) + kmean(y, y) - 2.0 * kmean(x, y)


def mmd_instance(rng):
    d = int(rng.integers(1, 9))
    x = rng.normal(size=(int(rng.integers(1, 9)), d)) * rng.uniform(0.1, 3.0)
    y = rng.normal(size=(int(rng.integers(1, 9)), d)) * rng.uniform(0.1, 3.0) + rng.normal(size=d)
    return x, y, float(rng.uniform(0.2, 10.0))


def test_c01_mmd_oracle():
    rng = make_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        x, y, gamma = mmd_instance(rng)
        got = mmd2(x, y, MmdConfig(gamma))
        worst = max(worst, abs(got - naive_mmd2(x.tolist(), y.tolist(), gamma)))
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-10 and elapsed < 5.0, f"max |diff| {worst:.2e} over 200 instances in {elapsed:.2f}s")


def test_c02_mmd_invariants():
    rng = make_rng(102)
    self_worst = sym_worst = 0.0
    min_value = math.inf
    for _ in range(1000):
        x, y, gamma = mmd_instance(rng)
        cfg = MmdConfig(gamma)
        xy, yx = mmd2(x, y, cfg), mmd2(y, x, cfg)
        self_worst = max(self_worst, abs(mmd2(x, x, cfg)))
        sym_worst = max(sym_worst, abs(xy - yx))
        min_value = min(min_value, xy)
    ok = self_worst <= 1e-12 and sym_worst <= 1e-12 and min_value >= -1e-12
    record(2, ok, f"|mmd2(X,X)| <= {self_worst:.1e}, asymmetry {sym_worst:.1e}, min {min_value:.2e}")


def test_c03_gradient_suite(prior_nets, small_model):
    mapping, synthesis = prior_nets
    rng = make_rng(103)
    start = time.perf_counter()
    worst = {}

    def check(name, analytic, f, x, h=1e-5):
        err = relative_error(analytic, finite_difference_gradient(f, x, h))
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(50):
        x, y, gamma = mmd_instance(rng)
        cfg = MmdConfig(gamma, squared_exponent=bool(rng.integers(2)))
        check("mmd2_grad", mmd2_grad(x, y, cfg), lambda q: mmd2(q, y, cfg), x)

        s = rng.normal(size=(int(rng.integers(2, 7)), int(rng.integers(1, 9))))
        check("cross_loss", cross_loss_grad(s), cross_loss, s)

        styles = map_latent(mapping, rng.normal(size=(synthesis.k, mapping.z_dim))) + 0.1 * rng.normal(size=(synthesis.k, 32))
        up = rng.normal(size=synthesis.image_shape)
        check("synthesize_vjp", synthesize_vjp(synthesis, styles, up), lambda w: float(np.sum(up * synthesize(synthesis, w))), styles)

        cond = rng.uniform(0.1, 0.9, (6, 6, 1))
        degraded = from_levels(rng.integers(0, 256, (6, 6, 1)))
        nats = cond.size * math.log(2.0)
        check(
            "nll_grad_wrt_condition",
            deg.nll_grad_wrt_condition(small_model, degraded, cond),
            lambda c: deg.nll_bits_per_dim(small_model, degraded, c) * nats,
            cond,
        )

    bank = sample_prior_bank(mapping, 64, seed=7)
    for i in range(50):
        cfg = RestoreConfig(gamma=float(rng.uniform(2.0, 20.0)), coeff=float(rng.choice([1.0, 10.0])), lambda_cross=0.01)
        styles = map_latent(mapping, rng.normal(size=(synthesis.k, mapping.z_dim)))
        observed = quantize(synthesize(synthesis, map_latent(mapping, rng.normal(size=(synthesis.k, mapping.z_dim)))))
        _, grad, _ = total_objective(styles, observed, small_model, bank, prior_nets, cfg)
        check("total_objective", grad, lambda w: total_objective(w, observed, small_model, bank, prior_nets, cfg)[0], styles)

    elapsed = time.perf_counter() - start
    limits = {"mmd2_grad": 1e-4}
    ok = all(err < limits.get(name, 1e-3) for name, err in worst.items()) and elapsed < 300
    detail = ", ".join(f"{n} {e:.1e}" for n, e in worst.items())
    record(3, ok, f"worst rel err: {detail}; 50 instances each, {elapsed:.0f}s")


def test_c04_mixture_normalization():
    rng = make_rng(104)
    worst = 0.0
    for seed in range(5):
        for dist in ("gaussian", "logistic"):
            m = deg.make_degradation_model(channels=8, n_blocks=2, n_mix=10, dist=dist, seed=seed)
            for k in m.params:
                m.params[k] = m.params[k] + 0.3 * rng.standard_normal(m.params[k].shape)
            cond = rng.random((16, 16, 1))
            degraded = from_levels(rng.integers(0, 256, (16, 16, 1)))
            pmf = np.exp(deg.mixture_log_pmf(deg.forward(m, degraded, cond)))
            worst = max(worst, float(np.max(np.abs(pmf.sum(axis=-1) - 1.0))))
    uniform = deg.make_uniform_model()
    bits = deg.nll_bits_per_dim(uniform, from_levels(rng.integers(0, 256, (16, 16, 1))), rng.random((16, 16, 1)))
    ok = worst <= 1e-6 and abs(bits - 8.0) <= 1e-4
    record(4, ok, f"max |sum pmf - 1| {worst:.1e} over 10 models x 256 pixels; uniform model {bits:.6f} bits/dim")


def test_c05_causality_audit():
    rng = make_rng(105)
    failures = []
    for seed in range(20):
        m = deg.make_degradation_model(
            channels=int(rng.choice([4, 8, 16])),
            n_blocks=int(rng.integers(1, 4)),
            n_mix=int(rng.integers(1, 6)),
            image_channels=int(rng.choice([1, 3])),
            dist=str(rng.choice(["gaussian", "logistic"])),
            seed=seed,
        )
        report = deg.causality_audit(m, make_rng(seed), trials=10, size=(10, 10))
        if not report.passed or report.receptive_radius > report.radius_bound:
            failures.append(seed)
    bad = deg.make_degradation_model(channels=8, n_blocks=2, seed=0)
    bad.taps = dict(bad.taps, right_first=((0, 0),))
    control = deg.causality_audit(bad, make_rng(0), trials=10, size=(10, 10))
    ok = not failures and not control.passed
    record(5, ok, f"20 random models clean (failures {failures}); unmasked control caught: {not control.passed}")


def test_c06_paired_unpaired_gap(blockquant_trained):
    result, _, test_pairs, elapsed = blockquant_trained
    res = exp.paired_unpaired_eval(result.model, test_pairs, seed=0)
    ok = res.paired + 0.5 <= res.unpaired and elapsed < 900
    record(6, ok, f"paired {res.paired:.3f} vs unpaired {res.unpaired:.3f} bits/dim; training {elapsed:.0f}s")


def test_c07_entropy_calibration(prior_nets):
    mapping, synthesis = prior_nets
    kind = AddNoise(3.0)
    pairs = make_toy_dataset(kind, 1200, make_rng(2), mapping, synthesis)
    train_pairs, test_pairs = pairs[:1000], pairs[1000:]
    result = deg.train(deg.make_degradation_model(seed=0), train_pairs, deg.TrainConfig(epochs=15))
    conds = np.stack([c for c, _ in test_pairs])
    degs = np.stack([d for _, d in test_pairs])
    nll = float(deg.batch_nll_bits_per_dim(result.model, degs, conds).mean())
    h = addnoise_entropy_bits(conds, kind.sigma)
    record(7, abs(nll - h) <= 0.3, f"test NLL {nll:.3f} vs analytic entropy {h:.3f} bits/dim (sigma 3)")


def test_c08_sphere_preservation(prior_nets, bank, small_model):
    mapping, synthesis = prior_nets
    rng = make_rng(108)
    observed = quantize(synthesize(synthesis, map_latent(mapping, rng.normal(size=(synthesis.k, 32)))))
    cfg = RestoreConfig(steps=100, gamma=None)
    res = restore(observed, prior_nets, small_model, bank, cfg)
    dev = float(np.max(np.abs(res.norms - res.radius)))
    ok = res.norms.shape == (100, synthesis.k) and dev <= 1e-9
    record(8, ok, f"max | ||w_i|| - r | = {dev:.1e} over 100 steps x {synthesis.k} styles (r = {res.radius:.4f})")


def test_c09_sr_ablation(prior_nets, bank):
    mapping, synthesis = prior_nets
    cfg = RestoreConfig(gamma=None, factor=4)
    start = time.perf_counter()
    with_mmd, without, decreased = [], [], 0
    for seed in range(20):
        z = make_rng(derive_seed(seed, 7)).standard_normal(mapping.z_dim)
        target = synthesize(synthesis, np.repeat(map_latent(mapping, z)[None], synthesis.k, axis=0))
        observed = downscale(target, cfg.factor)
        on = restore_sr(observed, prior_nets, bank, dataclasses.replace(cfg, seed=seed, use_mmd=True))
        off = restore_sr(observed, prior_nets, bank, dataclasses.replace(cfg, seed=seed, use_mmd=False))
        with_mmd.append(on.mmd2[-1])
        without.append(off.mmd2[-1])
        decreased += on.trace[-1]["nll"] < on.initial["nll"]
    elapsed = time.perf_counter() - start
    med_on, med_off = float(np.median(with_mmd)), float(np.median(without))
    ok = med_on < med_off and decreased >= 18 and elapsed < 600
    record(9, ok, f"median final mmd2 {med_on:.4f} with vs {med_off:.4f} without; fidelity fell in {decreased}/20; {elapsed:.0f}s")


def test_c10_candidate_ranking(blockquant_trained):
    result, _, test_pairs, _ = blockquant_trained
    hits = 0
    for seed in range(20):
        rng = make_rng(derive_seed(seed, 10))
        i, j = rng.choice(len(test_pairs), size=2, replace=False)
        (cond, observed), (other, _) = test_pairs[i], test_pairs[j]
        flip = bool(rng.integers(2))
        candidates = [other, cond] if flip else [cond, other]
        hits += exp.rank_candidates(result.model, observed, candidates)[0] == int(flip)
    record(10, hits >= 18, f"true original ranked first in {hits}/20 trials")


def test_c11_sampler(blockquant_trained):
    model = blockquant_trained[0].model
    cond, context = blockquant_trained[2][0]
    draws = 10_000
    worst = 0.0
    for pos in [(7, 9), (0, 0), (15, 15)]:
        pmf = np.exp(deg.mixture_log_pmf(deg.forward(model, context, cond)))[pos][0]
        levels = deg.sample_pixel(model, context, cond, pos, make_rng(derive_seed(111, *pos)), n=draws)[:, 0]
        tv = 0.5 * float(np.abs(np.bincount(levels, minlength=256) / draws - pmf).sum())
        worst = max(worst, tv)
    record(11, worst < 0.05, f"max total variation {worst:.4f} over 3 frozen contexts at 1e4 draws")


CLI_RUNS = [
    ("dataset", "make", ["--set", "dataset.n=10", "--set", "dataset.kind=addnoise:3"]),
    ("degmodel", "train", ["--set", "input.data={ds}", "--set", "model.channels=8", "--set", "model.n_blocks=1", "--set", "train.epochs=2"]),
    ("degmodel", "score", ["--set", "input.model={tr}/model", "--set", "input.data={ds}"]),
    ("degmodel", "sample", ["--set", "input.model={tr}/model", "--set", "input.condition={ds}/cond_00000.pgm"]),
    ("mmd", "eval", ["--set", "mmd.gamma=auto", "--set", "bank.size=200"]),
    ("restore", "run", ["--set", "input.model={tr}/model", "--set", "input.observed={ds}/deg_00001.pgm", "--set", "restore.steps=5"]),
    ("restore", "sr", ["--set", "input.observed={lr}", "--set", "restore.steps=5", "--set", "restore.gamma=auto"]),
    (
        "ablate",
        "run",
        ["--set", "ablate.axes=mmd,steps", "--set", "ablate.levels.steps=2,4", "--set", "experiment.n=8", "--set", "experiment.n_images=2"]
        + ["--set", "train.epochs=1", "--set", "model.channels=8", "--set", "model.n_blocks=1", "--set", "bank.size=100"],
    ),
]


def _outputs(d):
    return sorted(p.relative_to(d) for p in Path(d).rglob("*") if p.suffix in (".csv", ".pgm", ".ppm", ".mrt"))


def test_c12_cli_reproducibility(tmp_path):
    dirs = {"ds": tmp_path / "dataset", "tr": tmp_path / "train"}
    lr_path = tmp_path / "lr.pgm"
    mismatched = []
    for group, action, args in CLI_RUNS:
        out = {"make": dirs["ds"], "train": dirs["tr"]}.get(action, tmp_path / f"{group}_{action}")
        args = [a.format(ds=dirs["ds"], tr=dirs["tr"], lr=lr_path) for a in args]
        assert cli_main([group, action, "--seed", "5", "--out", str(out), "-q", *args]) == 0
        if action == "make":
            save_image(lr_path, downscale(load_image(out / "cond_00002.pgm"), 4))
        manifest = out / ("run_manifest.txt" if action == "make" else "manifest.txt")
        again = tmp_path / f"{group}_{action}_again"
        subprocess.run(
            [sys.executable, "-m", "mmdrestore", group, action, "--config", str(manifest), "--out", str(again), "-q"],
            check=True,
        )
        files = _outputs(out)
        assert files, f"{group} {action} wrote no outputs"
        for rel in files:
            if (out / rel).read_bytes() != (again / rel).read_bytes():
                mismatched.append(f"{group} {action}: {rel}")
        if _outputs(again) != files:
            mismatched.append(f"{group} {action}: file sets differ")
    record(12, not mismatched, f"8 commands re-run from manifests; mismatches: {mismatched or 'none'}")
