"""Score-conditioned diffusion transformer for mel-spectrogram synthesis."""

__version__ = "0.1.0"
