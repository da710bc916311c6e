"""Native adversarial examples from class-conditional GANs."""

__version__ = "0.1.0"
