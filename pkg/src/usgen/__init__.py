"""Small-dataset ultrasound image synthesis.

Two pipelines over one grayscale plane dataset: a diffusion model whose
samples are histogram-matched and super-resolved by a GAN, and a
window-attention transformer GAN trained with differentiable and adaptive
pseudo augmentation.  FID evaluation, deterministic seeding, and versioned
checkpoints throughout.
"""

__version__ = "0.1.0"

from . import (checkpoints, cli, config, dataset, diffusion, imageops, metrics,
               phantoms, superres, tbgan, trainer)

__all__ = [
    "checkpoints", "cli", "config", "dataset", "diffusion", "imageops",
    "metrics", "phantoms", "superres", "tbgan", "trainer", "__version__",
]
