"""FLOPs accounting and wall-time measurement.

Counting convention: 2 FLOPs per multiply-accumulate, matmuls only.
Softmax, layer norm, GeLU, biases, embeddings, and prediction heads are
excluded; at this scale they are linear-cost noise shared by every variant,
so speedup ratios are insensitive to them. Policy-network cost is charged
only when a policy actually scored the module (externally fixed masks cost
nothing), so reported speedups cannot hide the scorer's overhead.
"""

from __future__ import annotations

import csv
import gc
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import LayerTrace, Model, ModelConfig


def layer_flops(n: int, d: int, heads: int, ffn_inner: int) -> int:
    """One transformer layer on n tokens.

    8nd^2 covers the Q, K, V, and output projections, 4n^2 d the score and
    context products, and 4*n*d*ffn_inner the two feed-forward matmuls.
    `heads` is part of the shape contract but cancels out of the total.
    """
    if min(n, d, heads, ffn_inner) < 1:
        raise ValueError("all dimensions must be >= 1")
    if d % heads != 0:
        raise ValueError("heads must divide d")
    return 8 * n * d * d + 4 * n * n * d + 4 * n * d * ffn_inner


def policy_flops(n: int, d: int, policy_width: int) -> int:
    """One reduction module scoring n tokens: two matmuls of the scorer."""
    return 2 * n * (d * policy_width + policy_width)


@dataclass
class FlopsReport:
    """Cost of one traced pass next to its unpruned reference."""

    per_layer: list[int]
    per_module: list[int]
    reference_total: int

    @property
    def total(self) -> int:
        return sum(self.per_layer) + sum(self.per_module)

    @property
    def speedup(self) -> float:
        return self.reference_total / self.total


def trace_flops(trace: LayerTrace, cfg: ModelConfig) -> FlopsReport:
    """FLOPs implied by a trace's survivor counts, plus policy overhead."""
    d, heads, f = cfg.hidden, cfg.heads, cfg.ffn_inner
    per_layer = [
        layer_flops(len(trace.survivors[i + 1]), d, heads, f)
        for i in range(trace.num_layers)
    ]
    per_module = []
    if trace.plan is not None:
        for m in trace.plan.modules:
            if m.probs is not None:
                per_module.append(policy_flops(m.mask.size, d, cfg.policy_width))
    n = trace.n_original
    reference = sum(layer_flops(n, d, heads, f) for _ in range(trace.num_layers))
    return FlopsReport(per_layer=per_layer, per_module=per_module, reference_total=reference)


def write_flops_csv(path, rows: Sequence[dict]) -> None:
    """Per-example cost rows: example_id, orig_len, flops, reference, speedup."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "orig_len", "flops", "reference_flops", "speedup"])
        for r in rows:
            writer.writerow(
                [
                    r["example_id"],
                    r["orig_len"],
                    r["flops"],
                    r["reference_flops"],
                    f"{r['speedup']:.6f}",
                ]
            )


# ---------------------------------------------------------------------------
# wall time
# ---------------------------------------------------------------------------


@dataclass
class WallTime:
    """Median seconds for one pass over the measured batch."""

    median_seconds: float
    repeats: int
    inner_loops: int
    samples: list[float] = field(default_factory=list)


def wall_time(
    run_batch: Callable[[], None],
    repeats: int = 20,
    min_measurable: float = 1e-3,
    warmup: int = 2,
) -> WallTime:
    """Median wall time of `run_batch` over `repeats` measurements.

    If a single call is too fast for the timer, the batch is looped inside
    each measurement and the per-call time divided back out.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        run_batch()
    inner = 1
    while True:
        start = time.perf_counter()
        for _ in range(inner):
            run_batch()
        elapsed = time.perf_counter() - start
        if elapsed >= min_measurable or inner >= 1024:
            break
        inner *= 2
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(inner):
            run_batch()
        samples.append((time.perf_counter() - start) / inner)
    return WallTime(
        median_seconds=statistics.median(samples),
        repeats=repeats,
        inner_loops=inner,
        samples=samples,
    )


def interleaved_wall_times(
    runners: Sequence[Callable[[], None]],
    rounds: int = 20,
    warmup: int = 2,
) -> list[float]:
    """Median per-runner seconds, measured round-robin with collection off.

    Interleaving cancels slow machine-state drift that would otherwise bias
    comparisons between runners measured minutes apart.
    """
    for runner in runners:
        for _ in range(warmup):
            runner()
    samples: list[list[float]] = [[] for _ in runners]
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(rounds):
            for idx, runner in enumerate(runners):
                start = time.perf_counter()
                runner()
                samples[idx].append(time.perf_counter() - start)
            gc.collect()
    finally:
        if gc_was_enabled:
            gc.enable()
    return [statistics.median(s) for s in samples]


def batch_runner(model: Model, token_id_lists: Sequence, mode: str = "greedy", seed: int = 0):
    """A zero-argument callable running inference over a fixed batch.

    ``mode`` follows the evaluation modes: "full" (no reduction), "greedy",
    or "sample" (re-seeded identically every call so the work is stable).
    """
    from .reduction import reduced_forward
    from .model import full_forward
    from .seeding import substream

    ids = [np.asarray(t, dtype=np.int64) for t in token_id_lists]

    def run():
        if mode == "full":
            for t in ids:
                full_forward(model, t)
        else:
            rng = substream(seed, "walltime") if mode == "sample" else None
            for t in ids:
                reduced_forward(model, t, mode=mode, rng=rng)

    return run
