"""Privacy-preserving face de-identification with an adversarially trained generator."""

__version__ = "0.1.0"
