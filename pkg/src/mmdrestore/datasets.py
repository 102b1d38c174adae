"""Synthetic local degradations and (condition, degraded) pair datasets.

Three kinds, all local:

* ``blockquant``: per-block orthonormal DCT, uniform coefficient
  quantization with step ``(101 - quality) * STEP_UNIT``, inverse DCT.
  A JPEG stand-in without the codec.
* ``addnoise``: add Gaussian noise of ``sigma`` levels, rounded to the grid.
* ``boxblur``: mean over a (2r+1)^2 window with replicated borders.

Every degraded image is snapped to the 256-level grid.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special
from scipy.fft import dctn, idctn

from .config import read_config, write_config
from .core import from_levels, load_image, make_rng, quantize, sample_standard_normal, save_image, to_levels
from .prior import map_latent, synthesize

STEP_UNIT = 0.5 / 255.0


@dataclass(frozen=True)
class BlockQuant:
    block: int = 4
    quality: float = 50.0

    name = "blockquant"

    def __post_init__(self):
        if self.block < 1:
            raise ValueError("block size must be >= 1")
        if not 1 <= self.quality <= 100:
            raise ValueError("quality must lie in [1, 100]")

    @property
    def step(self):
        return (101.0 - self.quality) * STEP_UNIT

    def footprint(self, i, j, shape):
        b = self.block
        bi, bj = i // b * b, j // b * b
        return slice(bi, bi + b), slice(bj, bj + b)

    def spec(self):
        return f"blockquant:{self.block}:{self.quality:g}"


@dataclass(frozen=True)
class AddNoise:
    sigma: float = 3.0
    quantized: bool = True

    name = "addnoise"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def footprint(self, i, j, shape):
        return slice(i, i + 1), slice(j, j + 1)

    def spec(self):
        return f"addnoise:{self.sigma:g}:{int(self.quantized)}"


@dataclass(frozen=True)
class BoxBlur:
    radius: int = 1

    name = "boxblur"

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")

    def footprint(self, i, j, shape):
        r = self.radius
        return slice(max(i - r, 0), i + r + 1), slice(max(j - r, 0), j + r + 1)

    def spec(self):
        return f"boxblur:{self.radius}"


def parse_kind(text):
    """``blockquant:4:50``, ``addnoise:3[:1]``, ``boxblur:1``."""
    name, *args = text.strip().split(":")
    try:
        if name == "blockquant":
            return BlockQuant(int(args[0]) if args else 4, float(args[1]) if len(args) > 1 else 50.0)
        if name == "addnoise":
            return AddNoise(float(args[0]) if args else 3.0, bool(int(args[1])) if len(args) > 1 else True)
        if name == "boxblur":
            return BoxBlur(int(args[0]) if args else 1)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"bad degradation parameters in {text!r}") from exc
    raise ValueError(f"unknown degradation kind {name!r}")


def _block_dct(img, b):
    h, w, c = img.shape
    blocks = img.reshape(h // b, b, w // b, b, c)
    return dctn(blocks, axes=(1, 3), norm="ortho")


def _block_idct(coef):
    nb_h, b, nb_w, _, c = coef.shape
    return idctn(coef, axes=(1, 3), norm="ortho").reshape(nb_h * b, nb_w * b, c)


def degrade(kind, img, rng=None):
    """Apply ``kind`` to an [H, W, C] image; ``rng`` feeds the noise kinds."""
    img = np.asarray(img, dtype=np.float64)
    if isinstance(kind, BlockQuant):
        b = kind.block
        if img.shape[0] % b or img.shape[1] % b:
            raise ValueError(f"block size {b} must divide image size {img.shape[:2]}")
        coef = _block_dct(img, b)
        coef = np.round(coef / kind.step) * kind.step
        return quantize(_block_idct(coef))
    if isinstance(kind, AddNoise):
        if rng is None:
            raise ValueError("addnoise needs an rng")
        noise = kind.sigma * rng.standard_normal(img.shape)
        if kind.quantized:
            return from_levels(np.clip(to_levels(img) + np.floor(noise + 0.5), 0, 255))
        return quantize(np.clip(img + noise / 255.0, 0.0, 1.0))
    if isinstance(kind, BoxBlur):
        r = kind.radius
        padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
        h, w, _ = img.shape
        acc = np.zeros_like(img)
        for dy in range(2 * r + 1):
            for dx in range(2 * r + 1):
                acc += padded[dy : dy + h, dx : dx + w]
        return quantize(acc / (2 * r + 1) ** 2)
    raise TypeError(f"not a degradation kind: {kind!r}")


def addnoise_entropy_bits(condition, sigma):
    """Exact mean per-pixel entropy (bits) of quantized additive noise,
    including the mass piled onto levels 0 and 255 by clipping."""
    levels = to_levels(condition).reshape(-1)
    if sigma == 0:
        return 0.0
    k = np.arange(-255, 256)
    pk = special.ndtr((k + 0.5) / sigma) - special.ndtr((k - 0.5) / sigma)
    total = 0.0
    for lv, count in zip(*np.unique(levels, return_counts=True)):
        out = np.clip(lv + k, 0, 255)
        pmf = np.bincount(out, weights=pk, minlength=256)
        pmf = pmf[pmf > 0]
        total += count * float(-(pmf * np.log2(pmf)).sum())
    return total / levels.size


def prior_conditions(mapping, synthesis, n, rng):
    """``n`` quantized images from the toy prior, one shared style per image."""
    z = sample_standard_normal(rng, (n, mapping.z_dim))
    w = map_latent(mapping, z)
    return [quantize(synthesize(synthesis, np.repeat(w[i : i + 1], synthesis.k, axis=0))) for i in range(n)]


def directory_conditions(directory):
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix in (".pgm", ".ppm"))
    if not paths:
        raise ValueError(f"no .pgm/.ppm images in {directory}")
    return [load_image(p) for p in paths]


def make_toy_dataset(kind, n, rng, mapping=None, synthesis=None, directory=None):
    """``n`` (condition, degraded) pairs from the prior or from ``directory``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if directory is not None:
        pool = directory_conditions(directory)
        conds = [pool[i % len(pool)] for i in range(n)]
    else:
        conds = prior_conditions(mapping, synthesis, n, rng)
    return [(c, degrade(kind, c, rng)) for c in conds]


def save_dataset(directory, pairs, meta=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (c, g) in enumerate(pairs):
        save_image(d / f"cond_{i:05d}.{'pgm' if c.shape[2] == 1 else 'ppm'}", c)
        save_image(d / f"deg_{i:05d}.{'pgm' if g.shape[2] == 1 else 'ppm'}", g)
    values = dict(meta or {})
    values["count"] = str(len(pairs))
    write_config(d / "manifest.txt", values)


def load_dataset(directory):
    d = Path(directory)
    n = int(read_config(d / "manifest.txt")["count"])
    pairs = []
    for i in range(n):
        (cp,) = d.glob(f"cond_{i:05d}.p?m")
        (gp,) = d.glob(f"deg_{i:05d}.p?m")
        pairs.append((load_image(cp), load_image(gp)))
    return pairs


def split_dataset(pairs, test_fraction, seed):
    """Deterministic (train, test) split."""
    order = make_rng(seed).permutation(len(pairs))
    n_test = max(1, int(round(test_fraction * len(pairs))))
    return [pairs[i] for i in order[n_test:]], [pairs[i] for i in order[:n_test]]
