"""Heuristic token-importance strategies and the fixed-elimination harness.

Three scorers: random (lower bound), accumulated received attention, and
the residual score — the gradient of the task loss at a deep layer dotted
with the deep-minus-shallow state difference. The residual scorer needs
gold labels, so it is an oracle for analysis rather than something usable
at prediction time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .model import Model, full_forward
from .profiling import trace_flops
from .reduction import fixed_plan, reduced_forward
from .seeding import example_stream
from .synthetic import SyntheticExample

STRATEGIES = ("random", "attention", "residual")


@dataclass
class ImportanceScores:
    scores: np.ndarray
    strategy: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.isfinite(self.scores).all():
            raise ValueError("importance scores must be finite")


def default_shallow_layer(num_layers: int) -> int:
    return math.ceil(num_layers / 3)


def default_deep_layer(num_layers: int) -> int:
    return math.ceil(3 * num_layers / 4)


def random_importance(n: int, seed: int = 0, index: int = 0) -> ImportanceScores:
    """Uniform scores: the all-tokens-equal baseline."""
    if n < 1:
        raise ValueError("need at least one token")
    rng = example_stream(seed, "random-importance", index)
    return ImportanceScores(rng.random(n), "random", {"seed": seed, "index": index})


def attention_importance(trace, upto_layer: int) -> ImportanceScores:
    """Attention mass received by each token over the first `upto_layer` layers."""
    if trace.attention is None:
        raise ValueError("trace was recorded without attention matrices")
    if not (1 <= upto_layer <= len(trace.attention)):
        raise ValueError("upto_layer outside the recorded range")
    n = trace.n_original
    for surv in trace.survivors[: upto_layer + 1]:
        if surv.size != n:
            raise ValueError("attention importance needs an unreduced trace")
    scores = np.zeros(n)
    for layer in range(upto_layer):
        for head_attn in trace.attention[layer]:
            scores += head_attn.sum(axis=0)
    return ImportanceScores(scores, "attention", {"upto_layer": upto_layer})


def residual_importance(
    model: Model,
    token_ids,
    label,
    shallow: Optional[int] = None,
    deep: Optional[int] = None,
) -> ImportanceScores:
    """Per-token first-order loss change from freezing it at the shallow layer.

    score(j) = dLoss/dH_deep[j] . (H_deep[j] - H_shallow[j]); tokens whose
    deep representation no longer moves score exactly zero.
    """
    L = model.config.num_layers
    l = default_shallow_layer(L) if shallow is None else int(shallow)
    r = default_deep_layer(L) if deep is None else int(deep)
    if not (0 <= l < r <= L):
        raise ValueError(f"need shallow < deep within [0, {L}], got {l}, {r}")
    tape = Tape()
    result = full_forward(model, token_ids, tape=tape)
    loss = ad.mul(result.prediction.log_likelihood(label), -1.0)
    (grad_deep,) = ad.node_grads(tape, loss, [result.hidden_nodes[r]])
    diff = result.trace.hidden[r] - result.trace.hidden[l]
    scores = (grad_deep * diff).sum(axis=1)
    return ImportanceScores(scores, "residual", {"shallow": l, "deep": r})


def top_k_mask(scores: np.ndarray, k: int, force_anchor: bool = True) -> np.ndarray:
    """Boolean keep-mask of the k best scores; ties break toward earlier
    positions; the anchor replaces the weakest pick when forced in."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    k = int(min(max(k, 1), n))
    order = np.lexsort((np.arange(n), -scores))
    chosen = order[:k].copy()
    if force_anchor and 0 not in chosen:
        chosen[-1] = 0
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    return mask


def score_example(
    model: Model,
    example: SyntheticExample,
    strategy: str,
    elimination_layer: int,
    deep: Optional[int] = None,
    seed: int = 0,
    index: int = 0,
) -> ImportanceScores:
    if strategy == "random":
        return random_importance(example.n, seed=seed, index=index)
    if strategy == "attention":
        result = full_forward(model, example.tokens, record_attention=True)
        return attention_importance(result.trace, elimination_layer)
    if strategy == "residual":
        return residual_importance(
            model, example.tokens, example.label, shallow=elimination_layer, deep=deep
        )
    raise ValueError(f"strategy must be one of {STRATEGIES}")


@dataclass
class EliminationResult:
    strategy: str
    keep_ratio: float
    metric: float
    mean_speedup: float


def theoretical_elimination_eval(
    model: Model,
    examples: Sequence[SyntheticExample],
    strategy: str,
    keep_ratio: float,
    elimination_layer: Optional[int] = None,
    deep: Optional[int] = None,
    seed: int = 0,
) -> EliminationResult:
    """Rank tokens per example, keep the top fraction after a fixed layer,
    and score predictions made from the mixed-depth states."""
    if not (0.0 < keep_ratio <= 1.0):
        raise ValueError("keep_ratio must lie in (0, 1]")
    L = model.config.num_layers
    l = default_shallow_layer(L) if elimination_layer is None else int(elimination_layer)
    if not (1 <= l <= L - 1):
        raise ValueError(f"elimination layer must lie in [1, {L - 1}]")
    hits = 0
    speedups = []
    for idx, ex in enumerate(examples):
        scores = score_example(model, ex, strategy, l, deep=deep, seed=seed, index=idx)
        k = math.ceil(keep_ratio * ex.n)
        mask = top_k_mask(scores.scores, k)
        plan = fixed_plan([l], [mask])
        result = reduced_forward(model, ex.tokens, plan=plan)
        if result.prediction.predicted() == ex.label:
            hits += 1
        speedups.append(trace_flops(result.trace, model.config).speedup)
    return EliminationResult(
        strategy=strategy,
        keep_ratio=keep_ratio,
        metric=hits / len(examples),
        mean_speedup=float(np.mean(speedups)),
    )


def write_curve_csv(path, results: Sequence[EliminationResult]) -> None:
    """Trade-off rows for plotting: strategy, keep_ratio, metric, speedup."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "keep_ratio", "metric", "flops_speedup"])
        for r in results:
            writer.writerow(
                [r.strategy, f"{r.keep_ratio:.4f}", f"{r.metric:.6f}", f"{r.mean_speedup:.6f}"]
            )
