"""uselab: degradation simulation, SFI spectral analysis and distortion-perception tools for speech enhancement."""

__version__ = "0.1.0"
