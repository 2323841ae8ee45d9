"""Exemplar-autoencoder voice conversion toolkit.

Trains a target-specific autoencoder on a few minutes of one speaker's
audio (optionally with video) and converts arbitrary input speech into
that target's audiovisual style. Ships the evaluation, verification and
forensic tooling needed to validate such models end to end.
"""

__version__ = "0.1.0"
