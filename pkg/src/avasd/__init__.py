"""avasd: audiovisual active speaker detection engine."""

__version__ = "0.1.0"
