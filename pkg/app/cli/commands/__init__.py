"""Subcommand groups: each module exposes ``register(subparsers)``."""

from . import stages, synth

__all__ = ["stages", "synth"]
