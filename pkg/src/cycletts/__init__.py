"""Multi-reference TTS stylization with adversarial cycle-consistency training.

A text encoder and two reference audio encoders condition an attention-based
spectrogram decoder. Training mixes paired and unpaired reference triplets,
classifies real and re-encoded style embeddings through gradient-reversal
adversaries, and thereby learns style embeddings that transfer across
disjoint corpora (where one class of one style dimension only ever co-occurs
with a single class of the other).
"""

__version__ = "0.1.0"


class CycleTtsError(Exception):
    """Base class for errors raised by this package."""


class DataError(CycleTtsError):
    """Invalid or inconsistent data: manifests, audio files, labels."""


class NumericalError(CycleTtsError):
    """A computation produced a non-finite value."""
