"""ULMFiT-style transfer learning for authorship attribution."""

__version__ = "0.1.0"
