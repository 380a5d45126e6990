"""Prototype-selection sparse transformer decoder, desk scale.

Subpackages cover the sparse voxel scene model, a minimal reverse-mode
tensor engine, the prototype-selection attention operator with dense and
masked reference backends, the decoder stack with denoising training, the
matching/denoising losses, evaluation metrics, a latency benchmark harness
and a CLI tying it all together.
"""

__version__ = "0.1.0"
