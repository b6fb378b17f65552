"""Occlusion-adaptive two-branch expression classifier, built on a small numpy autodiff core."""

__version__ = "0.1.0"
