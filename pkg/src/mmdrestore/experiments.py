"""Evaluation protocols and ablation sweeps.

* paired vs unpaired NLL: score each degraded image under its own source
  and under another image's source (a seeded derangement).
* candidate ranking: order candidate originals by NLL of the observation.
* ablation: full factorial over restoration switches, one report row per
  (cell, image, seed) plus mean/median aggregates per cell.

No-reference IQA scores are not computed; reports carry NLL, MMD^2 and
fidelity (MSE to the known clean image) instead.
"""

import csv
import dataclasses
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import degradation as deg
from .config import flatten
from .core import derive_seed, make_rng
from .datasets import BlockQuant, make_toy_dataset
from .prior import PriorConfig, build_prior, sample_prior_bank
from .restore import RestoreConfig, restore

AXES = {
    "mean_init": ("use_mean_init", (False, True)),
    "mmd": ("use_mmd", (False, True)),
    "spherical": ("use_spherical", (False, True)),
    "coeff": ("coeff", (1.0, 10.0, 50.0)),
    "epochs": (None, (29, 379)),
    "steps": ("steps", (100, 1000)),
}
METRICS = ("paired_nll", "unpaired_nll", "final_mmd2", "fidelity")


def derangement(n, rng):
    """Uniform random cyclic permutation (Sattolo); no fixed points for n >= 2."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 items")
    sigma = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        sigma[i], sigma[j] = sigma[j], sigma[i]
    return sigma


class PairedUnpaired(NamedTuple):
    paired: float
    unpaired: float
    paired_rows: np.ndarray
    unpaired_rows: np.ndarray
    sigma: np.ndarray


def paired_unpaired_eval(model, pairs, seed=0):
    """Mean bits/dim of degraded_i under condition_i and under condition_sigma(i)."""
    if len(pairs) < 2:
        raise ValueError("paired/unpaired evaluation needs at least 2 pairs")
    conds = np.stack([c for c, _ in pairs])
    degs = np.stack([d for _, d in pairs])
    sigma = derangement(len(pairs), make_rng(seed))
    paired = deg.batch_nll_bits_per_dim(model, degs, conds)
    unpaired = deg.batch_nll_bits_per_dim(model, degs, conds[sigma])
    return PairedUnpaired(float(paired.mean()), float(unpaired.mean()), paired, unpaired, sigma)


def candidate_scores(model, observed, candidates):
    if not candidates:
        raise ValueError("no candidates")
    shapes = {np.shape(c) for c in candidates}
    if len(shapes) != 1 or np.shape(observed) not in shapes:
        raise ValueError("candidates and observation must share one size")
    n = len(candidates)
    return deg.batch_nll_bits_per_dim(model, np.repeat(np.asarray(observed)[None], n, axis=0), np.stack(candidates))


def rank_candidates(model, observed, candidates):
    """Candidate indices by ascending NLL of ``observed``; ties keep index order."""
    scores = candidate_scores(model, observed, candidates)
    return sorted(range(len(candidates)), key=lambda i: (scores[i], i))


# ------------------------------------------------------------------ ablation


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    n_blocks: int = 3
    n_mix: int = 10
    dist: str = "gaussian"
    seed: int = 0


@dataclass(frozen=True)
class ExperimentSpec:
    n: int = 200  # pairs generated; the last n_images of the split are restored
    n_images: int = 4
    kind: object = BlockQuant()
    prior: PriorConfig = PriorConfig()
    model: ModelConfig = ModelConfig()
    train: deg.TrainConfig = deg.TrainConfig()
    restore: RestoreConfig = RestoreConfig()
    bank_size: int = 1000
    seeds: tuple = (0,)
    out: str | None = None

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("n must be >= 4 so the data splits into train/val/test")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.n_images < 2 or self.n_images >= self.n:
            raise ValueError("n_images must lie in [2, n)")


@dataclass
class MetricsReport:
    axes: tuple
    rows: list  # dicts: cell, <axis values>, image, seed, METRICS...
    aggregates: list = field(default_factory=list)

    def aggregate(self):
        cells = {}
        for r in self.rows:
            cells.setdefault(r["cell"], []).append(r)
        self.aggregates = []
        for cell, rows in sorted(cells.items()):
            agg = {"cell": cell, **{a: rows[0][a] for a in self.axes}, "runs": len(rows)}
            for m in METRICS:
                vals = np.array([r[m] for r in rows], dtype=np.float64)
                agg[f"{m}_mean"] = float(np.mean(vals))
                agg[f"{m}_median"] = float(np.median(vals))
            self.aggregates.append(agg)
        return self.aggregates


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header] if isinstance(r, dict) else [_fmt(x) for x in r])


def _levels(axes, levels):
    out = []
    for a in axes:
        if a not in AXES:
            raise ValueError(f"unknown ablation axis {a!r}; choose from {sorted(AXES)}")
        vals = tuple(levels.get(a, AXES[a][1])) if levels else AXES[a][1]
        if len(vals) < 2:
            raise ValueError(f"axis {a!r} needs at least 2 levels")
        out.append(vals)
    return out


def prepare(spec, model=None, snapshot_epochs=(), log=None):
    """Prior nets, bank, train/test pairs and (if not given) a trained model."""
    mapping, synthesis = build_prior(spec.prior)
    bank = sample_prior_bank(mapping, spec.bank_size, seed=derive_seed(spec.prior.seed, 11))
    pairs = make_toy_dataset(spec.kind, spec.n, make_rng(derive_seed(spec.seeds[0], 12)), mapping, synthesis)
    train_pairs, test_pairs = pairs[: -spec.n_images], pairs[-spec.n_images :]
    models = {}
    if model is None:
        m = deg.make_degradation_model(
            spec.model.channels, spec.model.n_blocks, spec.model.n_mix, synthesis.image_shape[2], spec.model.dist, spec.model.seed
        )
        tcfg = spec.train
        if snapshot_epochs:
            tcfg = dataclasses.replace(tcfg, epochs=max(tcfg.epochs, *snapshot_epochs))
        result = deg.train(m, train_pairs, tcfg, snapshot_epochs=snapshot_epochs, log=log)
        model, models = result.model, result.snapshots
    return (mapping, synthesis), bank, train_pairs, test_pairs, model, models


def run_ablation(spec, axes, levels=None, model=None, log=None):
    """Full factorial over ``axes``; writes runs.csv / summary.csv when spec.out is set."""
    axes = tuple(axes)
    grid = _levels(axes, levels)
    epoch_levels = grid[axes.index("epochs")] if "epochs" in axes else ()
    if epoch_levels and model is not None:
        raise ValueError("the epochs axis trains its own snapshots; do not pass a model")
    nets, bank, _, test_pairs, model, snapshots = prepare(spec, model, tuple(int(e) for e in epoch_levels), log)

    out = Path(spec.out) if spec.out else None
    header = ["cell", *axes, "image", "seed", *METRICS]
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "runs.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)

    report = MetricsReport(axes, [])
    try:
        for cell_idx, values in enumerate(itertools.product(*grid)):
            changes, cell_model = {}, model
            for a, v in zip(axes, values):
                field_name = AXES[a][0]
                if field_name is None:
                    cell_model = snapshots[int(v)]
                else:
                    changes[field_name] = v
            for seed in spec.seeds:
                restored = []
                for img_idx, (clean, observed) in enumerate(test_pairs):
                    cfg = dataclasses.replace(spec.restore, seed=derive_seed(seed, cell_idx, img_idx), **changes)
                    res = restore(observed, nets, cell_model, bank, cfg)
                    restored.append(res)
                sigma = derangement(len(test_pairs), make_rng(derive_seed(seed, cell_idx, 99)))
                for img_idx, ((clean, observed), res) in enumerate(zip(test_pairs, restored)):
                    row = {
                        "cell": cell_idx,
                        **dict(zip(axes, values)),
                        "image": img_idx,
                        "seed": seed,
                        "paired_nll": deg.nll_bits_per_dim(cell_model, observed, res.image),
                        "unpaired_nll": deg.nll_bits_per_dim(cell_model, observed, restored[sigma[img_idx]].image),
                        "final_mmd2": float(res.mmd2[-1]),
                        "fidelity": float(np.mean((res.image - clean) ** 2)),
                    }
                    report.rows.append(row)
                    if writer is not None:
                        writer.writerow([_fmt(row[h]) for h in header])
                        fh.flush()
                if log is not None:
                    log(f"cell {cell_idx} {dict(zip(axes, values))} seed {seed} done")
    finally:
        if fh is not None:
            fh.close()

    report.aggregate()
    if out is not None:
        agg_header = ["cell", *axes, "runs"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "median")]
        write_csv(out / "summary.csv", agg_header, report.aggregates)
    return report


def spec_manifest(spec):
    values = {"kind": spec.kind.spec(), "n": str(spec.n), "n_images": str(spec.n_images), "bank_size": str(spec.bank_size)}
    values["seeds"] = ",".join(str(s) for s in spec.seeds)
    values.update(flatten(spec.prior, "prior"))
    values.update(flatten(spec.model, "model"))
    values.update(flatten(spec.train, "train"))
    values.update(flatten(spec.restore, "restore"))
    return values
