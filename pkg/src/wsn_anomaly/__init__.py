"""Multimodal sensor-network anomaly detection with a wavelet graph autoencoder."""

__version__ = "0.1.0"
