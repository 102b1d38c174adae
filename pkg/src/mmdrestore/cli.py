"""Command-line entry point.

    mmdrestore <group> <action> [--config PATH] [--seed N] [--out DIR] [--set key=value ...]

Every command resolves one flat config (file, then ``--set``, then the
global flags) and writes it back to ``<out>/manifest.txt`` together with
``record.*`` hashes of its inputs. Feeding that manifest back through
``--config`` repeats the run and reproduces its CSVs and images byte for
byte. Keys that a command does not use are reported on stderr and ignored.
"""

import argparse
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import degradation as deg
from . import experiments as exp
from .config import ConfigError, coerce, flatten, read_config, write_config
from .core import derive_seed, load_image, load_tensor, make_rng, save_image, save_tensor, sample_standard_normal
from .datasets import load_dataset, make_toy_dataset, parse_kind, save_dataset
from .mmd import DEFAULT_GAMMA, MmdConfig, bandwidth_from_bank, mmd2
from .prior import PriorConfig, build_prior, map_latent, sample_prior_bank
from .restore import RestoreConfig, restore, restore_sr

log = logging.getLogger("mmdrestore")

U64_MAX = (1 << 64) - 1


class Settings:
    """Resolved config plus a record of which keys a command consumed."""

    def __init__(self, values):
        self.values = dict(values)
        self.used = {}

    def get(self, key, default):
        if key in self.values:
            value = coerce(self.values[key], default)
        else:
            value = default
        self.used[key] = _text(value)
        return value

    def require(self, key):
        if key not in self.values or not self.values[key]:
            raise ConfigError(f"missing required setting {key!r} (use --set {key}=...)")
        self.used[key] = self.values[key]
        return self.values[key]

    def section(self, obj, prefix, seed=None):
        """Overlay ``prefix.*`` keys on a frozen dataclass; an unset ``seed``
        field inherits the global seed."""
        changes = {}
        for f in dataclasses.fields(obj):
            key = f"{prefix}.{f.name}"
            if key in self.values:
                raw = self.values[key]
                if "None" in str(f.type) and raw.lower() in ("none", "auto", ""):
                    changes[f.name] = None
                else:
                    changes[f.name] = coerce(raw, getattr(obj, f.name))
            elif f.name == "seed" and seed is not None:
                changes[f.name] = seed
        obj = dataclasses.replace(obj, **changes)
        self.used.update(flatten(obj, prefix))
        return obj

    def unused(self):
        return sorted(k for k in self.values if k not in self.used and k != "command" and not k.startswith("record."))


def _text(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_text(x) for x in v)
    return str(v)


def _sha(path):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.txt"
    return hashlib.sha256(p.read_bytes()).hexdigest()[:16]


def _input(s, key):
    path = Path(s.require(key)).resolve()
    if not path.exists():
        raise ConfigError(f"{key}: {path} does not exist")
    s.used[key] = str(path)
    s.used[f"record.{key}.sha256"] = _sha(path)
    return path


def _prior(s):
    cfg = s.section(PriorConfig(), "prior")
    mapping, synthesis = build_prior(cfg)
    h = hashlib.sha256()
    for w, b in mapping.layers:
        h.update(np.ascontiguousarray(w).tobytes() + np.ascontiguousarray(b).tobytes())
    h.update(np.ascontiguousarray(synthesis.base).tobytes())
    s.used["record.prior.sha256"] = h.hexdigest()[:16]
    return cfg, mapping, synthesis


def _bank(s, prior_cfg, mapping):
    size = s.get("bank.size", 1000)
    return sample_prior_bank(mapping, size, seed=derive_seed(prior_cfg.seed, 11))


def _model_cfg(s, seed):
    return s.section(exp.ModelConfig(), "model", seed)


def _csv(path, header, rows):
    exp.write_csv(path, header, rows)
    log.info("wrote %s", path)


# ------------------------------------------------------------------ commands


def cmd_dataset_make(s, out):
    seed = s.get("seed", 0)
    kind = parse_kind(s.get("dataset.kind", "blockquant:4:50"))
    n = s.get("dataset.n", 100)
    source = s.get("dataset.source", "prior")
    _, mapping, synthesis = _prior(s)
    directory = None
    if source != "prior":
        directory = Path(source).resolve()
        s.used["dataset.source"] = str(directory)
    pairs = make_toy_dataset(kind, n, make_rng(derive_seed(seed, 1)), mapping, synthesis, directory)
    save_dataset(out, pairs, {"kind": kind.spec()})
    ext = "pgm" if pairs[0][0].shape[2] == 1 else "ppm"
    _csv(out / "index.csv", ["index", "condition", "degraded"], [(i, f"cond_{i:05d}.{ext}", f"deg_{i:05d}.{ext}") for i in range(n)])


def cmd_degmodel_train(s, out):
    seed = s.get("seed", 0)
    pairs = load_dataset(_input(s, "input.data"))
    mcfg = _model_cfg(s, seed)
    tcfg = s.section(deg.TrainConfig(n_mix=mcfg.n_mix), "train", seed)
    if tcfg.n_mix != mcfg.n_mix:
        raise ConfigError("train.n_mix and model.n_mix disagree")
    model = deg.make_degradation_model(mcfg.channels, mcfg.n_blocks, mcfg.n_mix, pairs[0][0].shape[2], mcfg.dist, mcfg.seed)
    result = deg.train(model, pairs, tcfg, log=log.info)
    deg.save_model(out / "model", result.model, tcfg)
    _csv(out / "trace.csv", ["epoch", "train_nll", "val_nll"], result.trace)
    s.used["record.model.sha256"] = deg.model_digest(result.model)
    s.used["record.best_epoch"] = str(result.best_epoch)


def cmd_degmodel_score(s, out):
    seed = s.get("seed", 0)
    model = deg.load_model(_input(s, "input.model"))
    pairs = load_dataset(_input(s, "input.data"))
    res = exp.paired_unpaired_eval(model, pairs, seed=derive_seed(seed, 2))
    rows = [(i, float(p), float(u), int(j)) for i, (p, u, j) in enumerate(zip(res.paired_rows, res.unpaired_rows, res.sigma))]
    _csv(out / "scores.csv", ["index", "paired_nll", "unpaired_nll", "unpaired_condition"], rows)
    _csv(out / "summary.csv", ["count", "paired_nll", "unpaired_nll", "gap"], [(len(pairs), res.paired, res.unpaired, res.unpaired - res.paired)])


def cmd_degmodel_sample(s, out):
    seed = s.get("seed", 0)
    model = deg.load_model(_input(s, "input.model"))
    cond = load_image(_input(s, "input.condition"))
    img = deg.sample(model, cond, make_rng(derive_seed(seed, 3)))
    save_image(out / ("sample.pgm" if img.shape[2] == 1 else "sample.ppm"), img)
    _csv(out / "sample.csv", ["nll_bits_per_dim"], [(deg.nll_bits_per_dim(model, img, cond),)])


def cmd_mmd_eval(s, out):
    seed = s.get("seed", 0)
    need_prior = not (s.values.get("input.bank") and s.values.get("input.query"))
    prior_cfg, mapping, _ = _prior(s) if need_prior else (None, None, None)
    if s.values.get("input.bank"):
        bank = load_tensor(_input(s, "input.bank")).astype(np.float64)
    else:
        bank = _bank(s, prior_cfg, mapping).samples
    if s.values.get("input.query"):
        query = load_tensor(_input(s, "input.query")).astype(np.float64)
    else:
        size = s.get("mmd.query_size", 8)
        query = map_latent(mapping, sample_standard_normal(make_rng(derive_seed(seed, 4)), (size, mapping.z_dim)))
        save_tensor(out / "query.mrt", query)
    raw_gamma = s.get("mmd.gamma", repr(DEFAULT_GAMMA))
    gamma = bandwidth_from_bank(bank) if raw_gamma.lower() in ("auto", "none") else float(raw_gamma)
    cfg = MmdConfig(gamma, s.get("mmd.squared_exponent", False))
    value = mmd2(query, bank, cfg)
    _csv(out / "mmd.csv", ["gamma", "mmd2", "k", "k_bank"], [(float(gamma), float(value), query.shape[0], bank.shape[0])])


def _restore_outputs(s, out, res):
    save_image(out / ("restored.pgm" if res.image.shape[2] == 1 else "restored.ppm"), res.image)
    save_tensor(out / "styles.mrt", res.styles)
    _csv(out / "trace.csv", ["step", "total", "nll", "mmd", "cross"], res.trace_rows())
    s.used["record.radius"] = repr(float(res.radius))
    s.used["record.gamma"] = repr(float(res.gamma))


def cmd_restore_run(s, out):
    seed = s.get("seed", 0)
    model = deg.load_model(_input(s, "input.model"))
    observed = load_image(_input(s, "input.observed"))
    prior_cfg, mapping, synthesis = _prior(s)
    bank = _bank(s, prior_cfg, mapping)
    cfg = s.section(RestoreConfig(), "restore", seed)
    s.used["record.model.sha256"] = deg.model_digest(model)
    _restore_outputs(s, out, restore(observed, (mapping, synthesis), model, bank, cfg))


def cmd_restore_sr(s, out):
    seed = s.get("seed", 0)
    observed = load_image(_input(s, "input.observed"))
    prior_cfg, mapping, synthesis = _prior(s)
    bank = _bank(s, prior_cfg, mapping)
    cfg = s.section(RestoreConfig(), "restore", seed)
    _restore_outputs(s, out, restore_sr(observed, (mapping, synthesis), bank, cfg))


def cmd_ablate_run(s, out):
    seed = s.get("seed", 0)
    axes = tuple(a.strip() for a in s.get("ablate.axes", "mmd").split(",") if a.strip())
    levels = {}
    for a in axes:
        if a not in exp.AXES:
            raise ConfigError(f"unknown ablation axis {a!r}; choose from {sorted(exp.AXES)}")
        default = exp.AXES[a][1]
        text = s.get(f"ablate.levels.{a}", _text(default))
        levels[a] = tuple(coerce(t.strip(), default[0]) for t in text.split(","))
    seeds = tuple(int(t) for t in s.get("ablate.seeds", str(seed)).split(","))
    model = None
    if s.values.get("input.model"):
        model = deg.load_model(_input(s, "input.model"))
        s.used["record.model.sha256"] = deg.model_digest(model)
    spec = exp.ExperimentSpec(
        n=s.get("experiment.n", 200),
        n_images=s.get("experiment.n_images", 4),
        kind=parse_kind(s.get("experiment.kind", "blockquant:4:50")),
        prior=s.section(PriorConfig(), "prior"),
        model=_model_cfg(s, seed),
        train=s.section(deg.TrainConfig(), "train", seed),
        restore=s.section(RestoreConfig(), "restore", seed),
        bank_size=s.get("bank.size", 1000),
        seeds=seeds,
        out=str(out),
    )
    exp.run_ablation(spec, axes, levels, model=model, log=log.info)


COMMANDS = {
    ("dataset", "make"): (cmd_dataset_make, "generate (condition, degraded) pairs"),
    ("degmodel", "train"): (cmd_degmodel_train, "train the conditional degradation model"),
    ("degmodel", "score"): (cmd_degmodel_score, "paired / unpaired NLL of a dataset"),
    ("degmodel", "sample"): (cmd_degmodel_sample, "draw a degraded image for a condition"),
    ("mmd", "eval"): (cmd_mmd_eval, "MMD^2 between a style set and the prior bank"),
    ("restore", "run"): (cmd_restore_run, "restore a degraded image"),
    ("restore", "sr"): (cmd_restore_sr, "super-resolve a low-resolution image"),
    ("ablate", "run"): (cmd_ablate_run, "factorial ablation over restoration switches"),
}


def _u64(text):
    value = int(text, 0)
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="flat key = value config file")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS, help="base seed (u64)")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="mmdrestore", parents=[common], description=__doc__.splitlines()[0])
    groups = parser.add_subparsers(dest="group", required=True)
    sub = {}
    for (group, action), (_, help_text) in COMMANDS.items():
        if group not in sub:
            sub[group] = groups.add_parser(group, parents=[common]).add_subparsers(dest="action", required=True)
        sub[group].add_parser(action, parents=[common], help=help_text)
    return parser


def resolve(args):
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "overrides", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "out", None) is not None:
        values["out"] = str(args.out)
    return values


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO, format="%(message)s", stream=sys.stderr)
    fn, _ = COMMANDS[(args.group, args.action)]
    try:
        s = Settings(resolve(args))
        seed = s.get("seed", 0)
        if not 0 <= seed <= U64_MAX:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        out = Path(s.get("out", "out"))
        out.mkdir(parents=True, exist_ok=True)
        fn(s, out)
    except (ConfigError, ValueError, OSError) as exc:
        log.error("error: %s", exc)
        return 2
    for key in s.unused():
        log.warning("warning: setting %r is not used by %s %s", key, args.group, args.action)
    manifest = {"command": f"{args.group} {args.action}", **s.used}
    name = "run_manifest.txt" if (args.group, args.action) == ("dataset", "make") else "manifest.txt"
    write_config(out / name, manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
