"""Direction-aware additive kernels and two-discriminator adversarial training
for multi-task floor-plan segmentation, in numpy."""

__version__ = "0.1.0"
