"""Echo cancellation with a text side channel: mixture synthesis, an NLMS
baseline, a toy sequence-to-sequence model and its evaluation metrics."""

__version__ = "0.1.0"
