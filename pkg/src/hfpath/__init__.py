"""Path-dependent high-frequency statistics of Ito semimartingales."""

__version__ = "0.1.0"
