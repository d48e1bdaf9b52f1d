"""Learning with side information: side objectives, training procedures and a synthetic benchmark."""

__version__ = "0.1.0"
