"""Multi-scale convolutional encoders, transposed-conv decoders and a
shifted-window transformer, on a small numpy autodiff engine."""

__version__ = "0.1.0"
