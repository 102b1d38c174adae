"""Conditional density P(degraded | original) over 8-bit pixels.

A causal two-stream network (a "down" stream that sees rows strictly above,
a "right" stream that sees the current row strictly to the left) followed by
``n_blocks`` gated residual blocks. Every block also receives the condition
image: its raw values plus one 3x3 feature map, through 1x1 projections.
There is no down/up-sampling path. The head emits, for each pixel and
channel, a discretized mixture of ``n_mix`` univariate Gaussians.

Images are [H, W, C] arrays in [0, 1]; the network works on the [-1, 1] scale.
"""

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels, _nn
from .config import read_config
from .core import as_image, derive_seed, from_levels, load_tensor, make_rng, save_tensor, to_levels

DOWN_FIRST = ((-1, -1), (-1, 0), (-1, 1))
RIGHT_FIRST = ((0, -1),)
DOWN = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1))
RIGHT = ((0, -1), (0, 0))
CAUSAL_TAPS = {"down_first": DOWN_FIRST, "right_first": RIGHT_FIRST, "down": DOWN, "right": RIGHT}
DISTS = {"gaussian": _kernels.GAUSSIAN, "logistic": _kernels.LOGISTIC}

# Presets: toy is the desk-scale default, full is the large configuration.
PRESETS = {
    "toy": {"channels": 32, "n_blocks": 3},
    "full": {"channels": 100, "n_blocks": 6},
}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class MixtureParams:
    """Per-element mixture parameters; trailing axis is the component axis."""

    logits: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray
    dist: str = "gaussian"

    @property
    def weights(self):
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def __getitem__(self, idx):
        return MixtureParams(self.logits[idx], self.means[idx], self.log_scales[idx], self.dist)


@dataclass
class DegradationModel:
    channels: int = 32
    n_blocks: int = 3
    n_mix: int = 10
    image_channels: int = 1
    dist: str = "gaussian"
    params: dict = field(default_factory=dict)
    taps: dict = field(default_factory=lambda: dict(CAUSAL_TAPS))
    epoch: int = 0

    def copy(self):
        return copy.deepcopy(self)


def make_degradation_model(channels=32, n_blocks=3, n_mix=10, image_channels=1, dist="gaussian", seed=0, zero=False):
    """Fresh model. ``zero=True`` gives all-zero weights and biases."""
    if dist not in DISTS:
        raise ValueError(f"unknown mixture distribution {dist!r}")
    f, c, m = channels, image_channels, n_mix
    cc = c + f
    shapes = {
        "cond_w": (9 * c, f),
        "cond_b": (f,),
        "down0_w": (3 * c, f),
        "down0_b": (f,),
        "right0_w": (c, f),
        "right0_b": (f,),
        "link0_w": (f, f),
        "out_w": (f, 3 * c * m),
        "out_b": (3 * c * m,),
        "out_cond_w": (cc, 3 * c * m),
    }
    for i in range(n_blocks):
        shapes.update(
            {
                f"down{i + 1}_w": (6 * f, 2 * f),
                f"down{i + 1}_b": (2 * f,),
                f"down{i + 1}_cond_w": (cc, 2 * f),
                f"right{i + 1}_w": (2 * f, 2 * f),
                f"right{i + 1}_b": (2 * f,),
                f"right{i + 1}_link_w": (f, 2 * f),
                f"right{i + 1}_cond_w": (cc, 2 * f),
            }
        )
    rng = make_rng(seed)
    params = {}
    for name, shape in sorted(shapes.items()):
        if zero or name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    if not zero:
        params["out_w"] *= 0.1
        params["out_cond_w"] *= 0.1
        head = params["out_b"].reshape(c, 3, m)
        head[:, 1, :] = np.linspace(-0.9, 0.9, m)
        head[:, 2, :] = -2.0
    return DegradationModel(channels, n_blocks, n_mix, image_channels, dist, params)


def make_uniform_model(image_channels=1):
    """Exactly uniform PMF over the 256 levels: one sharp component per level."""
    m = _kernels.N_LEVELS
    model = make_degradation_model(channels=4, n_blocks=1, n_mix=m, image_channels=image_channels, zero=True)
    head = model.params["out_b"].reshape(image_channels, 3, m)
    head[:, 1, :] = np.arange(m) / 127.5 - 1.0
    head[:, 2, :] = _kernels.MIN_LOG_SCALE
    return model


# ------------------------------------------------------------------ network


def _stack(images):
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    return a


def _net_forward(model, degraded, condition, dtype):
    """Batched forward on [B, H, W, C] arrays; returns head output and cache."""
    p = {k: v.astype(dtype, copy=False) for k, v in model.params.items()}
    t = model.taps
    x = (2.0 * degraded - 1.0).astype(dtype)
    y = (2.0 * condition - 1.0).astype(dtype)
    c = model.image_channels

    cf_pre, col_cf = _nn.conv(y, _nn.FULL3, p["cond_w"], p["cond_b"])
    ycat = np.concatenate([y, _nn.elu(cf_pre)], axis=-1)
    v, col_v0 = _nn.conv(x, t["down_first"], p["down0_w"], p["down0_b"])
    h, col_h0 = _nn.conv(x, t["right_first"], p["right0_w"], p["right0_b"])
    h = h + v @ p["link0_w"]
    v_first = v

    f = model.channels
    blocks = []
    for i in range(1, model.n_blocks + 1):
        ev = _nn.elu(v)
        pv, col_v = _nn.conv(ev, t["down"], p[f"down{i}_w"], p[f"down{i}_b"])
        pv += ycat @ p[f"down{i}_cond_w"]
        sv = _nn.sigmoid(pv[..., f:])
        v_new = v + pv[..., :f] * sv

        eh = _nn.elu(h)
        ev_new = _nn.elu(v_new)
        ph, col_h = _nn.conv(eh, t["right"], p[f"right{i}_w"], p[f"right{i}_b"])
        ph += ev_new @ p[f"right{i}_link_w"] + ycat @ p[f"right{i}_cond_w"]
        sh = _nn.sigmoid(ph[..., f:])
        h_new = h + ph[..., :f] * sh
        blocks.append((v, col_v, pv, sv, v_new, ev_new, h, col_h, ph, sh))
        v, h = v_new, h_new

    eo = _nn.elu(h)
    out = eo @ p["out_w"] + p["out_b"] + ycat @ p["out_cond_w"]
    cache = (p, x, y, cf_pre, col_cf, ycat, v_first, col_v0, col_h0, blocks, h, eo)
    b, hh, ww = out.shape[:3]
    return out.reshape(b, hh, ww, c, 3, model.n_mix), cache


def _net_backward(model, dout, cache, want_params=True, want_condition=False):
    """Backprop a head gradient [B, H, W, C, 3, M] to params and/or condition."""
    p, x, y, cf_pre, col_cf, ycat, v0, col_v0, col_h0, blocks, h_last, eo = cache
    t = model.taps
    f, c = model.channels, model.image_channels
    dtype = eo.dtype
    dout = dout.reshape(dout.shape[:3] + (-1,)).astype(dtype)
    g = {}

    def acc(name, value):
        if want_params:
            g[name] = value

    def lin_grad(inp, d):
        return inp.reshape(-1, inp.shape[-1]).T @ d.reshape(-1, d.shape[-1])

    acc("out_w", lin_grad(eo, dout))
    acc("out_b", dout.reshape(-1, dout.shape[-1]).sum(axis=0))
    acc("out_cond_w", lin_grad(ycat, dout))
    d_ycat = dout @ p["out_cond_w"].T
    dh = (dout @ p["out_w"].T) * _nn.elu_grad(h_last)
    dv = np.zeros_like(dh)

    for i in range(model.n_blocks, 0, -1):
        v, col_v, pv, sv, v_new, ev_new, h, col_h, ph, sh = blocks[i - 1]
        # right stream
        a_h = ph[..., :f]
        dph = np.concatenate([dh * sh, dh * a_h * sh * (1.0 - sh)], axis=-1)
        deh, dw, db = _nn.conv_backward(dph, col_h, t["right"], p[f"right{i}_w"], f)
        acc(f"right{i}_w", dw)
        acc(f"right{i}_b", db)
        acc(f"right{i}_link_w", lin_grad(ev_new, dph))
        acc(f"right{i}_cond_w", lin_grad(ycat, dph))
        d_ycat += dph @ p[f"right{i}_cond_w"].T
        dv = dv + (dph @ p[f"right{i}_link_w"].T) * _nn.elu_grad(v_new)
        dh = dh + deh * _nn.elu_grad(h)
        # down stream
        a_v = pv[..., :f]
        dpv = np.concatenate([dv * sv, dv * a_v * sv * (1.0 - sv)], axis=-1)
        dev, dw, db = _nn.conv_backward(dpv, col_v, t["down"], p[f"down{i}_w"], f)
        acc(f"down{i}_w", dw)
        acc(f"down{i}_b", db)
        acc(f"down{i}_cond_w", lin_grad(ycat, dpv))
        d_ycat += dpv @ p[f"down{i}_cond_w"].T
        dv = dv + dev * _nn.elu_grad(v)

    if want_params:
        acc("link0_w", lin_grad(v0, dh))
        dv = dv + dh @ p["link0_w"].T
        _, dw, db = _nn.conv_backward(dh, col_h0, t["right_first"], p["right0_w"], c, need_input=False)
        acc("right0_w", dw)
        acc("right0_b", db)
        _, dw, db = _nn.conv_backward(dv, col_v0, t["down_first"], p["down0_w"], c, need_input=False)
        acc("down0_w", dw)
        acc("down0_b", db)

    d_cf = d_ycat[..., c:] * _nn.elu_grad(cf_pre)
    dy, dw, db = _nn.conv_backward(d_cf, col_cf, _nn.FULL3, p["cond_w"], c, need_input=want_condition)
    acc("cond_w", dw)
    acc("cond_b", db)
    d_cond = None
    if want_condition:
        d_cond = 2.0 * (dy + d_ycat[..., :c])
    return g, d_cond


def _split_head(out):
    return out[..., 0, :], out[..., 1, :], out[..., 2, :]


def _head_loss(model, out, levels):
    """Per-element NLL (nats) and head gradient, all flattened over B*H*W*C."""
    logits, means, raw = _split_head(out)
    m = model.n_mix
    nll, dl, dm, ds = _kernels.mixture_nll_grad(
        levels.reshape(-1), logits.reshape(-1, m), means.reshape(-1, m), raw.reshape(-1, m), DISTS[model.dist]
    )
    dout = np.stack([dl, dm, ds], axis=1).reshape(out.shape)
    return nll.reshape(levels.shape), dout


def _check_pair(model, degraded, condition):
    degraded, condition = as_image(degraded), as_image(condition)
    if degraded.shape != condition.shape:
        raise ValueError(f"size mismatch: degraded {degraded.shape} vs condition {condition.shape}")
    if degraded.shape[2] != model.image_channels:
        raise ValueError(f"model expects {model.image_channels} channels, got {degraded.shape[2]}")
    return degraded, condition


# --------------------------------------------------------------- public ops


def forward(model, degraded, condition):
    """Mixture parameters for every pixel and channel, arrays [H, W, C, M]."""
    degraded, condition = _check_pair(model, degraded, condition)
    out, _ = _net_forward(model, degraded[None], condition[None], np.float64)
    logits, means, raw = _split_head(out[0])
    return MixtureParams(logits, means, np.maximum(raw, _kernels.MIN_LOG_SCALE), model.dist)


def discretized_mixture_logprob(params, level):
    """Log-probability of integer ``level`` (broadcast over leading axes)."""
    level = np.asarray(level)
    if np.any(level < 0) or np.any(level > 255) or not np.issubdtype(level.dtype, np.integer):
        raise ValueError("pixel level must be an integer in 0..255")
    m = params.logits.shape[-1]
    lead = np.broadcast_shapes(params.logits.shape[:-1], level.shape)
    lv = np.broadcast_to(level, lead).reshape(-1)
    bc = [np.broadcast_to(a, lead + (m,)).reshape(-1, m) for a in (params.logits, params.means, params.log_scales)]
    nll = _kernels.mixture_nll_grad(lv, *bc, DISTS[params.dist])[0]
    out = -nll.reshape(lead)
    return float(out) if out.ndim == 0 else out


def mixture_log_pmf(params):
    """Log PMF over levels 0..255, shape [..., 256]."""
    lead = params.logits.shape[:-1]
    m = params.logits.shape[-1]
    flat = [a.reshape(-1, m) for a in (params.logits, params.means, params.log_scales)]
    return _kernels.mixture_log_pmf(*flat, DISTS[params.dist]).reshape(lead + (_kernels.N_LEVELS,))


def nll_bits_per_dim(model, degraded, condition):
    degraded, condition = _check_pair(model, degraded, condition)
    out, _ = _net_forward(model, degraded[None], condition[None], np.float64)
    nll, _ = _head_loss(model, out, to_levels(degraded)[None])
    return float(np.sum(nll, dtype=np.float64) / (nll.size * math.log(2.0)))


def batch_nll_bits_per_dim(model, degraded, condition, batch_size=64, dtype=np.float64):
    """Per-image bits/dim for stacked [N, H, W, C] arrays."""
    degraded, condition = _stack(degraded), _stack(condition)
    out = np.empty(degraded.shape[0])
    for s in range(0, degraded.shape[0], batch_size):
        d, c = degraded[s : s + batch_size], condition[s : s + batch_size]
        head, _ = _net_forward(model, d, c, dtype)
        logits, means, raw = _split_head(head)
        m = model.n_mix
        nll = _kernels.mixture_nll_grad(
            to_levels(d).reshape(-1), logits.reshape(-1, m), means.reshape(-1, m), raw.reshape(-1, m), DISTS[model.dist]
        )[0]
        out[s : s + batch_size] = nll.reshape(d.shape[0], -1).mean(axis=1) / math.log(2.0)
    return out


def nll_grad_wrt_condition(model, degraded, condition):
    """Gradient of the total NLL in nats (sum over pixels) w.r.t. condition."""
    degraded, condition = _check_pair(model, degraded, condition)
    out, cache = _net_forward(model, degraded[None], condition[None], np.float64)
    _, dout = _head_loss(model, out, to_levels(degraded)[None])
    _, d_cond = _net_backward(model, dout, cache, want_params=False, want_condition=True)
    return d_cond[0]


def nll_and_condition_grad(model, degraded, condition):
    """(bits/dim, d bits/dim / d condition) in a single pass."""
    degraded, condition = _check_pair(model, degraded, condition)
    out, cache = _net_forward(model, degraded[None], condition[None], np.float64)
    nll, dout = _head_loss(model, out, to_levels(degraded)[None])
    _, d_cond = _net_backward(model, dout, cache, want_params=False, want_condition=True)
    scale = 1.0 / (nll.size * math.log(2.0))
    return float(np.sum(nll, dtype=np.float64) * scale), d_cond[0] * scale


def param_grads(model, degraded, condition, dtype=np.float64):
    """Mean NLL (nats/dim) over a batch and its gradient w.r.t. every param."""
    degraded, condition = _stack(degraded), _stack(condition)
    out, cache = _net_forward(model, degraded, condition, dtype)
    nll, dout = _head_loss(model, out, to_levels(degraded))
    g, _ = _net_backward(model, dout / nll.size, cache, want_params=True)
    return float(np.mean(nll, dtype=np.float64)), g


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    n_mix: int = 10
    clip_norm: float = 5.0
    val_split: float = 0.1
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "n_mix", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.lr > 0 and self.clip_norm > 0):
            raise ValueError("lr and clip_norm must be positive")
        if not 0.0 < self.val_split < 1.0:
            raise ValueError("val_split must lie in (0, 1)")

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: DegradationModel
    trace: list  # dicts with epoch, train_nll, val_nll (bits/dim); epoch 0 is the untrained model
    best_epoch: int
    snapshots: dict = field(default_factory=dict)


def _as_arrays(dataset):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    conds, degs = zip(*dataset)
    conds = np.stack([as_image(c) for c in conds])
    degs = np.stack([as_image(d) for d in degs])
    if conds.shape != degs.shape:
        raise ValueError("condition and degraded images must share one size")
    return conds, degs


def train(model, dataset, cfg=TrainConfig(), snapshot_epochs=(), compute_dtype=np.float32, log=None):
    """Adam on mean NLL with early stopping on validation bits/dim.

    ``dataset`` is a list of (condition, degraded) pairs. Returns the best
    model by validation NLL and the per-epoch trace. ``snapshot_epochs``
    captures copies of the model as it stood at those epochs.
    """
    conds, degs = _as_arrays(dataset)
    n = conds.shape[0]
    rng = make_rng(derive_seed(cfg.seed, 1))
    order = rng.permutation(n)
    n_val = min(max(1, int(round(cfg.val_split * n))), n - 1) if n > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if n_val == 0:
        val_idx = train_idx

    model = model.copy()
    master = {k: v.astype(np.float64) for k, v in model.params.items()}
    model.params = master
    opt = _nn.Adam(master, lr=cfg.lr, clip_norm=cfg.clip_norm)

    def evaluate(idx):
        return float(np.mean(batch_nll_bits_per_dim(model, degs[idx], conds[idx], 128, compute_dtype)))

    trace = [{"epoch": 0, "train_nll": evaluate(train_idx), "val_nll": evaluate(val_idx)}]
    best_val, best_epoch, best_params = trace[0]["val_nll"], 0, copy.deepcopy(master)
    snapshots = {}
    if 0 in snapshot_epochs:
        snapshots[0] = model.copy()
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(train_idx)
        losses, weights = [], []
        for s in range(0, perm.size, cfg.batch_size):
            batch = perm[s : s + cfg.batch_size]
            loss, grads = param_grads(model, degs[batch], conds[batch], compute_dtype)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.step(master, grads)
            losses.append(loss)
            weights.append(batch.size)
        train_nll = float(np.average(losses, weights=weights)) / math.log(2.0)
        val_nll = evaluate(val_idx)
        if not math.isfinite(val_nll):
            raise TrainingDiverged(epoch)
        model.epoch = epoch
        trace.append({"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll})
        if log is not None:
            log(f"epoch {epoch}: train {train_nll:.4f} val {val_nll:.4f} bits/dim")
        if epoch in snapshot_epochs:
            snapshots[epoch] = model.copy()
        if val_nll < best_val:
            best_val, best_epoch, best_params, stale = val_nll, epoch, copy.deepcopy(master), 0
        else:
            stale += 1
            if stale >= cfg.patience and not snapshot_epochs:
                break
    model.params = best_params
    model.epoch = best_epoch
    return TrainResult(model, trace, best_epoch, snapshots)


# ----------------------------------------------------------------- sampling


def sample_pixel(model, context, condition, position, rng, n=1):
    """Draw ``n`` levels [n, C] for pixel ``position`` given a frozen context.

    Only context pixels before ``position`` in raster order can matter.
    """
    context, condition = _check_pair(model, context, condition)
    i, j = position
    out, _ = _net_forward(model, context[None], condition[None], np.float64)
    logits, means, raw = _split_head(out[0, i, j])
    log_pmf = _kernels.mixture_log_pmf(logits, means, raw, DISTS[model.dist])
    c = model.image_channels
    u = rng.random((n, c))
    return _kernels.sample_levels(np.tile(log_pmf, (n, 1)), u.reshape(-1)).reshape(n, c)


def sample(model, condition, rng):
    """Raster-order ancestral sample given ``condition``; deterministic per rng."""
    condition = as_image(condition)
    h, w, c = condition.shape
    if c != model.image_channels:
        raise ValueError(f"model expects {model.image_channels} channels, got {c}")
    img = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            img[i, j] = from_levels(sample_pixel(model, img, condition, (i, j), rng)[0])
    return img


# -------------------------------------------------------------------- audit


@dataclass
class AuditReport:
    passed: bool
    trials: int
    violations: list  # ((i, j) perturbed, (i, j) affected)
    receptive_radius: int
    radius_bound: int


def receptive_radius_bound(model):
    """Chebyshev reach of one degraded pixel, counted from the tap lists."""
    def reach(taps):
        return max(max(abs(dy), abs(dx)) for dy, dx in taps)

    return reach(model.taps["down_first"]) + model.n_blocks * max(reach(model.taps["down"]), reach(model.taps["right"]))


def causality_audit(model, rng, trials=20, size=(12, 12)):
    """Perturb single degraded pixels and check that no output at or before
    that pixel (raster order) moves, bit for bit."""
    h, w = size
    c = model.image_channels
    violations = []
    radius = 0
    for _ in range(trials):
        cond = rng.random((h, w, c))
        deg = from_levels(rng.integers(0, 256, (h, w, c)))
        i, j = int(rng.integers(h)), int(rng.integers(w))
        bumped = deg.copy()
        bumped[i, j] = from_levels((to_levels(deg[i, j]) + rng.integers(1, 256, c)) % 256)
        base, _ = _net_forward(model, deg[None], cond[None], np.float64)
        moved, _ = _net_forward(model, bumped[None], cond[None], np.float64)
        changed = np.any(base[0] != moved[0], axis=(2, 3, 4))
        raster = np.arange(h * w).reshape(h, w)
        p = i * w + j
        for qi, qj in zip(*np.nonzero(changed)):
            if raster[qi, qj] <= p:
                violations.append(((i, j), (int(qi), int(qj))))
            else:
                radius = max(radius, abs(int(qi) - i), abs(int(qj) - j))
    return AuditReport(not violations, trials, violations, radius, receptive_radius_bound(model))


# ------------------------------------------------------------- checkpoints


def save_model(directory, model, train_cfg=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [
        f"arch.channels = {model.channels}",
        f"arch.n_blocks = {model.n_blocks}",
        f"arch.n_mix = {model.n_mix}",
        f"arch.image_channels = {model.image_channels}",
        f"arch.dist = {model.dist}",
        f"epoch = {model.epoch}",
        f"train_config_hash = {train_cfg.digest() if train_cfg is not None else 'none'}",
    ]
    for name in sorted(model.params):
        save_tensor(d / f"{name}.mrt", model.params[name])
        lines.append(f"shape.{name} = {'x'.join(str(s) for s in model.params[name].shape)}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_model(directory):
    d = Path(directory)
    man = read_config(d / "manifest.txt")
    params = {k[len("shape.") :]: load_tensor(d / f"{k[len('shape.'):]}.mrt").astype(np.float64) for k in man if k.startswith("shape.")}
    return DegradationModel(
        channels=int(man["arch.channels"]),
        n_blocks=int(man["arch.n_blocks"]),
        n_mix=int(man["arch.n_mix"]),
        image_channels=int(man["arch.image_channels"]),
        dist=man["arch.dist"],
        params=params,
        epoch=int(man["epoch"]),
    )


def model_digest(model):
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]
