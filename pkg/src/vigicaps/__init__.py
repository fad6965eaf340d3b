"""Vigilance estimation from EEG and EOG with an LSTM-capsule regression network."""

__version__ = "0.1.0"
