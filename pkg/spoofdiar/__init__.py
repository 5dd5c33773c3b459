"""spoofdiar: frame-level spoof diarization with attractor tokens"""

__version__ = "0.1.0"
