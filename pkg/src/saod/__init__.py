"""Dense pseudo-label self-training for sparsely annotated oriented object detection."""

__version__ = "0.1.0"
