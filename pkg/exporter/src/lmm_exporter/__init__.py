"""Offline feature exporter: runs a vision encoder and a language model over
video frames and writes (pooled vision feature, fixed-length LM hidden
states) records in the MMFR feature-file format consumed by the detector."""

__version__ = "0.1.0"
