"""Leakage-free cross-subject EEG vowel decoding benchmark."""
__version__ = "0.1.0"
