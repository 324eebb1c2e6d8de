"""Activation steering on a toy decoder-only transformer, with the synthetic
accent task, metrics and waveform augmentation that go with it."""

__version__ = "0.1.0"
