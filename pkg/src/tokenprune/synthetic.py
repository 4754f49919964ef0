"""Synthetic tasks with known ground-truth important tokens.

Disjoint vocabulary bands make importance unambiguous: one anchor id, a
neutral filler band, class-specific signal bands for the keyword task, and
query/answer marker ids for the span task. Labels are reproducible from the
tokens alone by simple scanning oracles, so selection quality is checkable
without any trained model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .model import LayerTrace
from .seeding import example_stream

ANCHOR_ID = 0
FILLER_LO, FILLER_HI = 16, 80  # [lo, hi)
QUERY_BASE = 96  # query marker for span type c is QUERY_BASE + c
ANSWER_BASE = 112  # answer marker for span type c is ANSWER_BASE + c
CLASS_BASE, CLASS_BAND = 128, 16  # class c signals live in [base+16c, base+16c+16)


def class_band(c: int) -> tuple[int, int]:
    lo = CLASS_BASE + CLASS_BAND * c
    return lo, lo + CLASS_BAND


def token_class(token_id: int) -> Optional[int]:
    """Class owning a signal token id, or None for non-signal ids."""
    if token_id < CLASS_BASE:
        return None
    return (token_id - CLASS_BASE) // CLASS_BAND


@dataclass
class SyntheticExample:
    """One sequence with its label and causal-token mask."""

    tokens: list[int]
    label: object  # class id, or (start, end) span
    signal: np.ndarray  # bool per token

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=bool)
        if len(self.tokens) != self.signal.size:
            raise DataError("signal mask length must match token count")
        if not self.signal.any():
            raise DataError("every example needs at least one signal token")

    @property
    def n(self) -> int:
        return len(self.tokens)


def gen_keyword_task(
    n_examples: int,
    seq_len: int = 48,
    n_classes: int = 4,
    signal_count: int = 4,
    seed: int = 0,
    vocab_size: int = 256,
) -> list[SyntheticExample]:
    """Classification: the label is the plurality class of the signal tokens.

    Filler comes from the neutral band; each signal token is drawn from its
    class band. Class assignments are resampled until one class holds a
    strict plurality, so a bag-of-signals vote reproduces every label.
    """
    if signal_count >= seq_len:
        raise ValueError("signal_count must be smaller than seq_len")
    if n_classes < 2 or n_classes > (vocab_size - CLASS_BASE) // CLASS_BAND:
        raise ValueError("unsupported class count for this vocabulary")
    examples = []
    for idx in range(n_examples):
        rng = example_stream(seed, "keyword", idx)
        tokens = np.empty(seq_len, dtype=np.int64)
        tokens[0] = ANCHOR_ID
        tokens[1:] = rng.integers(FILLER_LO, FILLER_HI, size=seq_len - 1)
        signal_pos = np.sort(rng.choice(np.arange(1, seq_len), size=signal_count, replace=False))
        while True:
            classes = rng.integers(0, n_classes, size=signal_count)
            counts = np.bincount(classes, minlength=n_classes)
            winners = np.flatnonzero(counts == counts.max())
            if winners.size == 1:
                break
        label = int(winners[0])
        for pos, c in zip(signal_pos, classes):
            lo, hi = class_band(int(c))
            tokens[pos] = rng.integers(lo, hi)
        signal = np.zeros(seq_len, dtype=bool)
        signal[signal_pos] = True
        examples.append(SyntheticExample(tokens.tolist(), label, signal))
    return examples


def keyword_vote_oracle(tokens: Sequence[int]) -> int:
    """Bag-of-words plurality vote over class bands."""
    votes: dict[int, int] = {}
    for t in tokens:
        c = token_class(int(t))
        if c is not None:
            votes[c] = votes.get(c, 0) + 1
    best = max(votes.values())
    winners = [c for c, v in votes.items() if v == best]
    if len(winners) != 1:
        raise DataError("keyword example without a strict plurality")
    return winners[0]


def gen_marker_span_task(
    n_examples: int,
    seq_len: int = 48,
    seed: int = 0,
    n_types: Optional[int] = None,
) -> list[SyntheticExample]:
    """Span extraction: a query marker names which answer-marker run to find.

    The label is the (start, end) of the run whose type matches the query;
    the signal mask covers the query token and that run.
    """
    if seq_len < 8:
        raise ValueError("span task needs seq_len >= 8")
    if n_types is None:
        n_types = 3 if seq_len >= 16 else 2
    max_run = 3 if seq_len >= 16 else 1
    examples = []
    for idx in range(n_examples):
        rng = example_stream(seed, "span", idx)
        while True:
            tokens = np.empty(seq_len, dtype=np.int64)
            tokens[0] = ANCHOR_ID
            tokens[1:] = rng.integers(FILLER_LO, FILLER_HI, size=seq_len - 1)
            query_pos = int(rng.integers(1, 5))
            query_type = int(rng.integers(0, n_types))
            free = np.ones(seq_len, dtype=bool)
            free[0] = False
            free[query_pos] = False
            spans = {}
            ok = True
            for c in rng.permutation(n_types):
                length = int(rng.integers(1, max_run + 1))
                starts = [
                    s
                    for s in range(1, seq_len - length + 1)
                    if free[s : s + length].all()
                ]
                if not starts:
                    ok = False
                    break
                s = int(starts[int(rng.integers(0, len(starts)))])
                spans[int(c)] = (s, s + length - 1)
                free[max(0, s - 1) : s + length + 1] = False  # keep runs separated
            if ok:
                break
        tokens[query_pos] = QUERY_BASE + query_type
        for c, (s, e) in spans.items():
            tokens[s : e + 1] = ANSWER_BASE + c
        start, end = spans[query_type]
        signal = np.zeros(seq_len, dtype=bool)
        signal[query_pos] = True
        signal[start : end + 1] = True
        examples.append(SyntheticExample(tokens.tolist(), (start, end), signal))
    return examples


def span_scan_oracle(tokens: Sequence[int]) -> tuple[int, int]:
    """Locate the answer run matching the query marker by direct scanning."""
    query_type = None
    for t in tokens:
        if QUERY_BASE <= t < ANSWER_BASE:
            query_type = t - QUERY_BASE
            break
    if query_type is None:
        raise DataError("span example without a query marker")
    target = ANSWER_BASE + query_type
    start = None
    for i, t in enumerate(tokens):
        if t == target and start is None:
            start = i
        elif t != target and start is not None:
            return (start, i - 1)
    if start is not None:
        return (start, len(tokens) - 1)
    raise DataError("span example without a matching answer run")


def selection_recall(trace: LayerTrace, signal_mask) -> float:
    """Fraction of signal tokens that survived every reduction module."""
    signal = np.asarray(signal_mask, dtype=bool)
    if signal.size != trace.n_original:
        raise ValueError("signal mask length must match the traced sequence")
    keepers = trace.termination_layer == trace.num_layers
    total = int(signal.sum())
    if total == 0:
        raise ValueError("signal mask marks no tokens")
    return float(np.count_nonzero(keepers & signal)) / total


# ---------------------------------------------------------------------------
# dataset files: one header line of generator metadata, then one example per line
# ---------------------------------------------------------------------------


def save_dataset(path, examples: Sequence[SyntheticExample], meta: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for ex in examples:
            label = list(ex.label) if isinstance(ex.label, tuple) else ex.label
            row = {
                "tokens": [int(t) for t in ex.tokens],
                "label": label,
                "signal": [int(b) for b in ex.signal],
            }
            fh.write(json.dumps(row) + "\n")


def load_dataset(path) -> tuple[list[SyntheticExample], dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if not lines:
        raise DataError(f"dataset {path} is empty")
    try:
        header = json.loads(lines[0])
        meta = header["meta"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"dataset {path} has a malformed header") from exc
    examples = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            label = row["label"]
            if isinstance(label, list):
                label = (int(label[0]), int(label[1]))
            ex = SyntheticExample(
                [int(t) for t in row["tokens"]],
                label,
                np.asarray(row["signal"], dtype=bool),
            )
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise DataError(f"dataset {path} line {ln} is malformed: {exc}") from exc
        examples.append(ex)
    if not examples:
        raise DataError(f"dataset {path} holds no examples")
    return examples, meta
