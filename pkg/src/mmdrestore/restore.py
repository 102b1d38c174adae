"""Latent-space restoration under the prior-bank MMD penalty.

Minimises, over the k style vectors,

    coeff * NLL_bits(observed | synthesize(styles))
        + lambda_mmd * MMD^2(styles, bank) + lambda_cross * cross(styles)

by spherical gradient descent (each style kept on its own sphere) from the
mean-latent initialization. ``restore_sr`` swaps the NLL term for the squared
error between the box-downscaled synthesis and a low-resolution observation.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import degradation as deg
from .core import as_image, derive_seed, make_rng, sample_standard_normal
from .mmd import MmdConfig, bandwidth_from_bank, bank_term, mmd2, mmd2_grad
from .prior import map_latent, mean_latent, synthesize, synthesize_vjp

COEFF_PRESETS = (1.0, 10.0, 50.0)


class RestoreDiverged(RuntimeError):
    def __init__(self, step):
        super().__init__(f"objective became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class RestoreConfig:
    steps: int = 100
    lr: float = 0.5
    radius: str = "bank"  # "bank" (mean bank norm), "sqrt_d", or a number
    lambda_mmd: float = 1.0
    coeff: float = 1.0
    lambda_cross: float = 0.01
    gamma: float | None = 512.0  # None: median pairwise bank distance
    squared_exponent: bool = False
    use_mmd: bool = True
    use_mean_init: bool = True
    use_spherical: bool = True
    sphere_mode: str = "tangent"  # or "renormalize"
    mean_samples: int = 10000
    factor: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.lambda_mmd, self.coeff, self.lambda_cross) < 0:
            raise ValueError("coefficients must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.sphere_mode not in ("tangent", "renormalize"):
            raise ValueError(f"unknown sphere_mode {self.sphere_mode!r}")
        if self.use_mean_init and self.mean_samples < 10000:
            raise ValueError("mean-latent initialization needs mean_samples >= 10000")


@dataclass
class RestoreResult:
    styles: np.ndarray
    image: np.ndarray
    trace: list  # per step: step, total, nll, mmd, cross (weighted terms)
    norms: np.ndarray  # [steps, k] style norms after each step
    mmd2: np.ndarray  # unweighted MMD^2 after each step
    initial: dict = field(default_factory=dict)
    radius: float = 0.0
    gamma: float = 0.0

    def trace_rows(self):
        return [(r["step"], r["total"], r["nll"], r["mmd"], r["cross"]) for r in self.trace]


# ------------------------------------------------------------ pieces


def spherical_step(w, grad, lr, r, mode="tangent"):
    """One descent step that stays on the sphere ||w|| = r."""
    w = np.asarray(w, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not r > 0:
        raise ValueError("radius must be > 0")
    if abs(np.linalg.norm(w) - r) > 1e-6 * max(1.0, r):
        raise ValueError(f"w is off the sphere: |w| = {np.linalg.norm(w)}, r = {r}")
    g = grad - (grad @ w / r**2) * w if mode == "tangent" else grad
    moved = w - lr * g
    n = np.linalg.norm(moved)
    if n < 1e-12:
        raise ValueError("degenerate step: iterate passed through the origin")
    return r * moved / n


def cross_loss(styles):
    """Mean squared distance over all style pairs i < j."""
    s = np.asarray(styles, dtype=np.float64)
    k = s.shape[0]
    if k < 2:
        raise ValueError("cross loss needs at least 2 styles")
    diff = s[:, None, :] - s[None, :, :]
    return float(np.sum(diff**2) / 2.0 / (k * (k - 1) / 2))


def cross_loss_grad(styles):
    s = np.asarray(styles, dtype=np.float64)
    k = s.shape[0]
    if k < 2:
        raise ValueError("cross loss needs at least 2 styles")
    pairs = k * (k - 1) / 2
    return 2.0 * (k * s - s.sum(axis=0)) / pairs


def downscale(img, factor):
    img = np.asarray(img, dtype=np.float64)
    h, w, c = img.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide image size {(h, w)}")
    return img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def downscale_vjp(upstream, factor):
    up = np.asarray(upstream, dtype=np.float64)
    return up.repeat(factor, axis=0).repeat(factor, axis=1) / factor**2


def _split_nets(nets):
    if isinstance(nets, tuple):
        return nets
    return None, nets


class _PriorTerms:
    """MMD and cross terms with the constant bank-bank sum cached."""

    def __init__(self, bank, cfg):
        self.bank = bank.samples if hasattr(bank, "samples") else np.asarray(bank, dtype=np.float64)
        gamma = cfg.gamma if cfg.gamma is not None else bandwidth_from_bank(self.bank)
        self.mmd_cfg = MmdConfig(gamma, cfg.squared_exponent)
        self.bank_self = bank_term(self.bank, self.mmd_cfg)
        self.lambda_mmd = cfg.lambda_mmd if cfg.use_mmd else 0.0
        self.lambda_cross = cfg.lambda_cross

    def __call__(self, styles):
        raw = mmd2(styles, self.bank, self.mmd_cfg, bank_self=self.bank_self)
        grad = np.zeros_like(styles)
        if self.lambda_mmd:
            grad += self.lambda_mmd * mmd2_grad(styles, self.bank, self.mmd_cfg)
        cross = cross_loss(styles)
        grad += self.lambda_cross * cross_loss_grad(styles)
        return self.lambda_mmd * raw, self.lambda_cross * cross, raw, grad


def total_objective(styles, observed, model, bank, nets, cfg, prior_terms=None):
    """(value, gradient [k, d], parts) for the restoration objective."""
    _, synthesis = _split_nets(nets)
    styles = np.asarray(styles, dtype=np.float64)
    observed = as_image(observed)
    terms = prior_terms or _PriorTerms(bank, cfg)
    img = synthesize(synthesis, styles)
    if img.shape != observed.shape:
        raise ValueError(f"observed shape {observed.shape} != synthesized shape {img.shape}")
    bits, d_img = deg.nll_and_condition_grad(model, observed, img)
    mmd_term, cross_term, raw, grad = terms(styles)
    if cfg.coeff:
        grad = grad + cfg.coeff * synthesize_vjp(synthesis, styles, d_img)
    nll_term = cfg.coeff * bits
    value = nll_term + mmd_term + cross_term
    if not math.isfinite(value):
        raise ValueError("non-finite objective")
    return value, grad, {"nll": nll_term, "mmd": mmd_term, "cross": cross_term, "mmd2": raw, "fidelity": bits}


def sr_objective(styles, observed_lr, bank, nets, cfg, prior_terms=None):
    """Like :func:`total_objective` with squared downscaling error as fidelity."""
    _, synthesis = _split_nets(nets)
    styles = np.asarray(styles, dtype=np.float64)
    terms = prior_terms or _PriorTerms(bank, cfg)
    img = synthesize(synthesis, styles)
    resid = downscale(img, cfg.factor) - observed_lr
    if resid.shape != np.shape(observed_lr):
        raise ValueError("observed_lr must be the synthesized size divided by factor")
    fidelity = float(np.sum(resid**2))
    mmd_term, cross_term, raw, grad = terms(styles)
    grad = grad + synthesize_vjp(synthesis, styles, downscale_vjp(2.0 * resid, cfg.factor))
    value = fidelity + mmd_term + cross_term
    if not math.isfinite(value):
        raise ValueError("non-finite objective")
    return value, grad, {"nll": fidelity, "mmd": mmd_term, "cross": cross_term, "mmd2": raw, "fidelity": fidelity}


# --------------------------------------------------------------- loop


def sphere_radius(cfg, bank_samples):
    if cfg.radius == "bank":
        return float(np.mean(np.linalg.norm(bank_samples, axis=1)))
    if cfg.radius == "sqrt_d":
        return math.sqrt(bank_samples.shape[1])
    return float(cfg.radius)


def initial_styles(nets, cfg, k):
    mapping, synthesis = _split_nets(nets)
    if mapping is None:
        raise ValueError("initialization needs the mapping network: pass nets as (mapping, synthesis)")
    if cfg.use_mean_init:
        w = mean_latent(mapping, cfg.mean_samples, make_rng(derive_seed(cfg.seed, 101)))
    else:
        z = sample_standard_normal(make_rng(derive_seed(cfg.seed, 102)), (mapping.z_dim,))
        w = map_latent(mapping, z)
    return np.repeat(w[None, :], k, axis=0)


def _optimize(objective, styles, cfg, r):
    if cfg.use_spherical:
        styles = r * styles / np.linalg.norm(styles, axis=1, keepdims=True)
    value, grad, parts = objective(styles)
    initial = dict(parts, total=value)
    trace, norms, raw = [], [], []
    for step in range(1, cfg.steps + 1):
        if cfg.use_spherical:
            styles = np.stack([spherical_step(w, g, cfg.lr, r, cfg.sphere_mode) for w, g in zip(styles, grad)])
        else:
            styles = styles - cfg.lr * grad
        try:
            value, grad, parts = objective(styles)
        except ValueError as exc:
            raise RestoreDiverged(step) from exc
        if not np.all(np.isfinite(grad)):
            raise RestoreDiverged(step)
        trace.append({"step": step, "total": value, "nll": parts["nll"], "mmd": parts["mmd"], "cross": parts["cross"]})
        norms.append(np.linalg.norm(styles, axis=1))
        raw.append(parts["mmd2"])
    return styles, trace, np.array(norms), np.array(raw), initial


def restore(observed, nets, model, bank, cfg=RestoreConfig()):
    _, synthesis = _split_nets(nets)
    observed = as_image(observed)
    terms = _PriorTerms(bank, cfg)
    r = sphere_radius(cfg, terms.bank)
    styles0 = initial_styles(nets, cfg, synthesis.k)

    def objective(s):
        return total_objective(s, observed, model, None, nets, cfg, prior_terms=terms)

    styles, trace, norms, raw, initial = _optimize(objective, styles0, cfg, r)
    return RestoreResult(styles, synthesize(synthesis, styles), trace, norms, raw, initial, r, terms.mmd_cfg.bandwidth_gamma)


def restore_sr(observed_lr, nets, bank, cfg=RestoreConfig()):
    _, synthesis = _split_nets(nets)
    observed_lr = np.asarray(observed_lr, dtype=np.float64)
    if observed_lr.ndim == 2:
        observed_lr = observed_lr[:, :, None]
    h, w, c = synthesis.image_shape
    if observed_lr.shape != (h // cfg.factor, w // cfg.factor, c):
        raise ValueError(f"observed_lr must have shape {(h // cfg.factor, w // cfg.factor, c)}")
    terms = _PriorTerms(bank, cfg)
    r = sphere_radius(cfg, terms.bank)
    styles0 = initial_styles(nets, cfg, synthesis.k)

    def objective(s):
        return sr_objective(s, observed_lr, None, nets, cfg, prior_terms=terms)

    styles, trace, norms, raw, initial = _optimize(objective, styles0, cfg, r)
    return RestoreResult(styles, synthesize(synthesis, styles), trace, norms, raw, initial, r, terms.mmd_cfg.bandwidth_gamma)
