"""Zero-shot token labeling from sentence-level supervision with soft attention."""

__version__ = "0.1.0"
