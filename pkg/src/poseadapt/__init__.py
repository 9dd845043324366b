"""Domain-adaptive absolute camera pose regression at desk scale."""

__version__ = "0.1.0"
