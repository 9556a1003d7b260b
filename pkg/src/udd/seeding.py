"""Labelled random streams derived from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master: int, label: str) -> np.random.Generator:
    """Independent generator for ``label``, e.g. ``"policy/t=17/c=3"``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, label)))
