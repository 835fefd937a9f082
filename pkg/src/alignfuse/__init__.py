"""Cross-modal alignment and fusion of volumetric images and clinical text."""

__version__ = "0.1.0"
