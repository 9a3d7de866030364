"""GAN-enhanced single-shot detection of small objects, built on a small numpy autodiff core."""

__version__ = "0.1.0"
