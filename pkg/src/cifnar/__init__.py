"""Non-autoregressive CIF sequence transduction with CTC-spike alignment and a contextual decoder."""

__version__ = "0.1.0"
