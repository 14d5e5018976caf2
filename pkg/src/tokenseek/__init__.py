"""Instance-aware token seeking and selective backpropagation for transformer fine-tuning."""

__version__ = "0.1.0"
