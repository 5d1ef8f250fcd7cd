"""Semantic-ID item quantization, SID edge store, GSU/ESU ranking and alignment tooling."""

__version__ = "0.1.0"
