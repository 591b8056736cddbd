"""Cross-view global localisation of a ground sensor in an aerial forest map."""

from .geometry import LabeledCloud, Pose6, compose, inverse

__version__ = "0.1.0"

__all__ = ["LabeledCloud", "Pose6", "compose", "inverse", "__version__"]
