"""Image restoration in a style generator's latent space, regularized by a
maximum mean discrepancy penalty against a bank of prior styles, with a
learned conditional degradation model as the data term.

Modules:

* ``core``: seeded RNG, quantization, tensor/image files, gradient oracle
* ``mmd``: kernel MMD^2 against the prior bank and its gradient
* ``prior``: toy mapping and synthesis networks, prior bank
* ``degradation``: causal conditional mixture model of degraded pixels
* ``restore``: spherical latent optimization (restoration and SR)
* ``datasets`` / ``experiments`` / ``cli``: toy data, protocols, CLI
"""

from .core import derive_seed, load_image, load_tensor, make_rng, save_image, save_tensor
from .mmd import MmdConfig, mmd2, mmd2_grad

__version__ = "0.1.0"

__all__ = [
    "MmdConfig",
    "derive_seed",
    "load_image",
    "load_tensor",
    "make_rng",
    "mmd2",
    "mmd2_grad",
    "save_image",
    "save_tensor",
]
