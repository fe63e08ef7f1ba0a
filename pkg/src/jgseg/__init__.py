"""Joint image/label generative segmentation at toy scale."""

__version__ = "0.1.0"
