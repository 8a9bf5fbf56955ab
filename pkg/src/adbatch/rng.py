"""Reproducible random streams.

Every random draw in a run comes from a Philox (counter-based) generator
whose key is derived from ``(master seed, run index, round, purpose tag)``.
Two streams with different tags never overlap, and a stream can be rebuilt
at any point of a run without replaying earlier draws, so results do not
depend on evaluation order or thread scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "tag_id"]


def tag_id(tag: str) -> int:
    """Stable 32-bit integer for a purpose tag."""
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, run: int = 0, round_: int = 0, tag: str = "") -> np.random.Generator:
    """Return the generator for one ``(seed, run, round, tag)`` cell.

    Parameters
    ----------
    seed : int
        Master seed of the experiment.
    run : int
        Macro-replication index.
    round_ : int
        Design round (or any other counter the caller wants to key on).
    tag : str
        Purpose of the draws, e.g. ``"simulate"`` or ``"acquisition"``.
    """
    if min(seed, run, round_) < 0:
        raise ValueError("seed, run and round must be nonnegative")
    ss = np.random.SeedSequence([int(seed), int(run), int(round_), tag_id(tag)])
    # Seeding Philox from the sequence keeps it spawnable (scipy.stats.qmc
    # engines spawn child streams from the generator they are given).
    return np.random.Generator(np.random.Philox(ss))
