"""Class-conditional GAN for cytology image synthesis and its evaluation harness."""

__version__ = "0.1.0"
