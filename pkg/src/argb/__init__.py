"""Augmented RGB (aRGB): a per-pixel representation space for image restoration losses."""

from argb.model import ARGBModel, EffectiveDecoder, top1_masks

__all__ = ["ARGBModel", "EffectiveDecoder", "top1_masks"]
__version__ = "0.1.0"
