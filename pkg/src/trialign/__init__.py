"""Tri-modal (image / 2D pose / 3D pose) contrastive embedding alignment at desk scale."""
__version__ = "0.1.0"
