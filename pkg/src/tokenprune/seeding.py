"""Named deterministic random streams.

Every random decision in the package (data generation, parameter init,
action sampling) draws from a stream derived from one master seed plus a
string label, so components can be re-seeded independently and runs are
reproducible across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for the stream named `label` under the master `seed`."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _label_key(label)]))


def example_stream(seed: int, label: str, index: int) -> np.random.Generator:
    """Per-example generator: independent of how many examples precede it."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), _label_key(label), int(index)])
    )
