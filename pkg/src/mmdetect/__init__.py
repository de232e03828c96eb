"""Multi-modal detector for diffusion-generated video.

Subpackages cover the tensor/autodiff core, the VQ-VAE trace amplifier,
the in-and-across frame attention backbone, multi-modal feature plumbing,
the dynamic fusion head, training, the synthetic corpus, and evaluation.
"""

__version__ = "0.1.0"
