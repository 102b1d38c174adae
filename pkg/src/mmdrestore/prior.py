"""Toy style-based generator standing in for a pretrained StyleGAN.

``MappingNetwork`` sends Gaussian z to W; ``SynthesisNetwork`` turns k style
vectors into an image. Weights are drawn once from a seed and frozen.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _nn
from .core import load_tensor, make_rng, sample_standard_normal, save_tensor

LEAK = 0.2


@dataclass
class MappingNetwork:
    layers: list  # [(weight [out, in], bias [out]), ...]
    seed: int | None = None

    @property
    def z_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def w_dim(self):
        return self.layers[-1][0].shape[0]


@dataclass
class SynthesisNetwork:
    base: np.ndarray  # [4, 4, C0]
    styles: list  # per style: dict(affine [C_in, d], affine_bias [C_in], weight [9*C_in, C_out], bias [C_out])
    to_image: tuple  # (weight [C_last, channels], bias [channels])
    seed: int | None = None

    @property
    def k(self):
        return len(self.styles)

    @property
    def w_dim(self):
        return self.styles[0]["affine"].shape[1]

    @property
    def n_stages(self):
        return self.k // 2

    @property
    def image_shape(self):
        side = self.base.shape[0] * 2**self.n_stages
        return (side, side, self.to_image[0].shape[1])


@dataclass
class PriorBank:
    samples: np.ndarray  # [k', d]
    seed: int
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PriorConfig:
    z_dim: int = 32
    w_dim: int = 32
    mapping_layers: int = 3
    channels: int = 16
    n_stages: int = 2
    image_channels: int = 1
    seed: int = 0


# ------------------------------------------------------------------ mapping


def make_mapping_network(z_dim=32, w_dim=32, n_layers=3, seed=0):
    rng = make_rng(seed)
    dims = [z_dim] + [w_dim] * n_layers
    gain = np.sqrt(2.0 / (1.0 + LEAK**2))
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * gain / np.sqrt(fan_in)
        b = rng.standard_normal(fan_out) * 0.2
        layers.append((w, b))
    return MappingNetwork(layers, seed)


def identity_mapping(dim):
    return MappingNetwork([(np.eye(dim), np.zeros(dim))])


def _map_forward(net, z):
    h = z
    pre = []
    for i, (w, b) in enumerate(net.layers):
        a = h @ w.T + b
        pre.append((h, a))
        h = a if i == len(net.layers) - 1 else _nn.leaky_relu(a, LEAK)
    return h, pre


def map_latent(net, z):
    """Map z ([d_z] or [n, d_z]) to W."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != net.z_dim or z.ndim not in (1, 2):
        raise ValueError(f"expected z of length {net.z_dim}, got shape {z.shape}")
    return _map_forward(net, z)[0]


def map_latent_vjp(net, z, upstream):
    z = np.asarray(z, dtype=np.float64)
    out, pre = _map_forward(net, z)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != out.shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {out.shape}")
    for i in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[i]
        h, a = pre[i]
        if i != len(net.layers) - 1:
            g = g * _nn.leaky_relu_grad(a, LEAK)
        g = g @ w
    return g


def sample_prior_bank(net, count=1000, seed=0):
    if count < 2:
        raise ValueError("a prior bank needs at least 2 samples")
    z = sample_standard_normal(make_rng(seed), (count, net.z_dim))
    return PriorBank(map_latent(net, z), int(seed), {"count": int(count)})


def mean_latent(net, n_samples, rng):
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    z = sample_standard_normal(rng, (n_samples, net.z_dim))
    return map_latent(net, z).mean(axis=0)


# ---------------------------------------------------------------- synthesis


def make_synthesis_network(w_dim=32, channels=16, n_stages=2, image_channels=1, seed=0):
    """Constant 4x4 base, then per stage: 2x upsample and two modulated 3x3 convs."""
    rng = make_rng(seed)
    base = rng.standard_normal((4, 4, channels))
    styles = []
    for _ in range(2 * n_stages):
        styles.append(
            {
                "affine": rng.standard_normal((channels, w_dim)) * 0.5 / np.sqrt(w_dim),
                "affine_bias": np.ones(channels),
                "weight": rng.standard_normal((9 * channels, channels)) * np.sqrt(2.0 / (9 * channels)),
                "bias": rng.standard_normal(channels) * 0.1,
            }
        )
    to_image = (rng.standard_normal((channels, image_channels)) * 0.5 / np.sqrt(channels), np.zeros(image_channels))
    return SynthesisNetwork(base, styles, to_image, seed)


def build_prior(cfg=PriorConfig()):
    mapping = make_mapping_network(cfg.z_dim, cfg.w_dim, cfg.mapping_layers, seed=cfg.seed)
    synthesis = make_synthesis_network(cfg.w_dim, cfg.channels, cfg.n_stages, cfg.image_channels, seed=cfg.seed + 1)
    return mapping, synthesis


def _check_styles(net, styles):
    styles = np.asarray(styles, dtype=np.float64)
    if styles.shape != (net.k, net.w_dim):
        raise ValueError(f"styles must have shape {(net.k, net.w_dim)}, got {styles.shape}")
    return styles


def _synth_forward(net, styles):
    x = net.base[None]
    cache = []
    for i, layer in enumerate(net.styles):
        if i % 2 == 0:
            x = _nn.upsample2(x)
        scale = layer["affine"] @ styles[i] + layer["affine_bias"]
        y, col = _nn.conv(x * scale, _nn.FULL3, layer["weight"], layer["bias"])
        cache.append((x, scale, col, y))
        x = _nn.leaky_relu(y, LEAK)
    w_img, b_img = net.to_image
    logits = x @ w_img + b_img
    img = _nn.sigmoid(logits)
    return img[0], (cache, x, img)


def synthesize(net, styles):
    """Render styles [k, d] to an image [H, W, C] in (0, 1)."""
    return _synth_forward(net, _check_styles(net, styles))[0]


def synthesize_vjp(net, styles, upstream):
    """Gradient of <upstream, synthesize(styles)> w.r.t. styles, shape [k, d]."""
    styles = _check_styles(net, styles)
    img, (cache, x_last, img_b) = _synth_forward(net, styles)
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 2:
        up = up[:, :, None]
    if up.shape != img.shape:
        raise ValueError(f"upstream shape {up.shape} != image shape {img.shape}")
    w_img, _ = net.to_image
    d_logits = up[None] * img_b * (1.0 - img_b)
    dx = d_logits @ w_img.T
    grads = np.zeros_like(styles)
    for i in range(len(net.styles) - 1, -1, -1):
        layer = net.styles[i]
        x_in, scale, col, y = cache[i]
        dy = dx * _nn.leaky_relu_grad(y, LEAK)
        dxm, _, _ = _nn.conv_backward(dy, col, _nn.FULL3, layer["weight"], x_in.shape[-1])
        d_scale = np.einsum("bhwc,bhwc->c", dxm, x_in)
        grads[i] = layer["affine"].T @ d_scale
        dx = dxm * scale
        if i % 2 == 0:
            dx = _nn.upsample2_backward(dx)
    return grads


# ------------------------------------------------------------- serialization


def save_networks(directory, mapping, synthesis):
    """One .mrt file per array plus a manifest of shapes and seeds."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for i, (w, b) in enumerate(mapping.layers):
        arrays[f"mapping.{i}.weight"] = w
        arrays[f"mapping.{i}.bias"] = b
    arrays["synthesis.base"] = synthesis.base
    for i, layer in enumerate(synthesis.styles):
        for key, value in layer.items():
            arrays[f"synthesis.{i}.{key}"] = value
    arrays["synthesis.to_image.weight"], arrays["synthesis.to_image.bias"] = synthesis.to_image
    lines = [
        f"mapping.seed = {mapping.seed}",
        f"mapping.layers = {len(mapping.layers)}",
        f"synthesis.seed = {synthesis.seed}",
        f"synthesis.styles = {synthesis.k}",
    ]
    for name, value in arrays.items():
        save_tensor(d / f"{name}.mrt", value)
        lines.append(f"shape.{name} = {'x'.join(str(s) for s in np.shape(value))}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_networks(directory):
    from .config import read_config

    d = Path(directory)
    man = read_config(d / "manifest.txt")

    def get(name):
        return load_tensor(d / f"{name}.mrt").astype(np.float64)

    def seed(key):
        return None if man[key] == "None" else int(man[key])

    layers = [(get(f"mapping.{i}.weight"), get(f"mapping.{i}.bias")) for i in range(int(man["mapping.layers"]))]
    keys = ("affine", "affine_bias", "weight", "bias")
    styles = [{k: get(f"synthesis.{i}.{k}") for k in keys} for i in range(int(man["synthesis.styles"]))]
    synthesis = SynthesisNetwork(
        get("synthesis.base"),
        styles,
        (get("synthesis.to_image.weight"), get("synthesis.to_image.bias")),
        seed("synthesis.seed"),
    )
    return MappingNetwork(layers, seed("mapping.seed")), synthesis
