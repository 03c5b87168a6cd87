"""First-shot autoencoder baseline for unsupervised anomalous sound detection."""

__version__ = "0.1.0"
