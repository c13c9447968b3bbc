"""CTC speech-recognition encoders with gated interlayer collaboration (GIC)."""

__version__ = "0.1.0"
