"""One-step diffusion distillation with high-frequency-promoting low-rank
adaptors, at desk scale."""
__version__ = "0.1.0"
