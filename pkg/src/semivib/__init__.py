"""semivib: semi-supervised bearing fault diagnosis with VAE-based generative models."""

__version__ = "0.1.0"
