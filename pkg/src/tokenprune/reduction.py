"""Token-reduction modules: policy scoring, Select/Skip execution, assembly.

A reduction module sits before a chosen layer, scores each surviving token
with a two-layer GeLU policy network ending in a sigmoid, and either keeps
the token for deeper layers or freezes its current state as final. Skipped
tokens keep the representation they had entering the module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .model import (
    ForwardResult,
    LayerTrace,
    Model,
    ModelConfig,
    check_token_ids,
    embed,
    embed_values,
    layer_forward,
    layer_values,
    predict,
    predict_values,
    wrap_prediction,
    _gelu_values,
)

DECIDE_MODES = ("sample", "greedy")


@dataclass
class PolicyParams:
    """Weights of one reduction module's scorer."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def bind(self, tape: Tape, prefix: str) -> "PolicyNodes":
        return PolicyNodes(
            tape.param(f"{prefix}.w1", self.w1),
            tape.param(f"{prefix}.b1", self.b1),
            tape.param(f"{prefix}.w2", self.w2),
            tape.param(f"{prefix}.b2", self.b2),
        )


@dataclass
class PolicyNodes:
    w1: Node
    b1: Node
    w2: Node
    b2: Node


def policy_view(model: Model, t: int) -> PolicyParams:
    """The t-th reduction module's parameters (shared arrays, not copies)."""
    return PolicyParams(
        model.params[f"policy{t}.w1"],
        model.params[f"policy{t}.b1"],
        model.params[f"policy{t}.w2"],
        model.params[f"policy{t}.b2"],
    )


def _policy_nodes_from(pn: dict[str, Node], t: int) -> PolicyNodes:
    return PolicyNodes(
        pn[f"policy{t}.w1"], pn[f"policy{t}.b1"], pn[f"policy{t}.w2"], pn[f"policy{t}.b2"]
    )


def policy_probs(tape: Tape, H: Node, policy: PolicyNodes) -> Node:
    """Per-token Select probability: sigmoid over a two-layer GeLU scorer."""
    inner = ad.gelu(ad.add(ad.matmul(H, policy.w1), policy.b1))
    logits = ad.add(ad.matmul(inner, policy.w2), policy.b2)
    return ad.sigmoid(logits)


def policy_probs_values(params: dict, t: int, H: np.ndarray) -> np.ndarray:
    """Value-path twin of `policy_probs`; returns a flat probability vector."""
    inner = _gelu_values(H @ params[f"policy{t}.w1"] + params[f"policy{t}.b1"])
    logits = inner @ params[f"policy{t}.w2"] + params[f"policy{t}.b2"]
    z = np.exp(-np.abs(logits))
    out = np.where(logits >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return out[:, 0]


def decide(
    probs: np.ndarray,
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
    threshold: float = 0.5,
) -> np.ndarray:
    """Turn Select probabilities into a boolean mask.

    ``sample`` draws independent Bernoulli actions from `rng`; ``greedy``
    selects wherever the probability reaches `threshold`.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode requires a random generator")
        return rng.random(p.size) < p
    if mode == "greedy":
        return p >= threshold
    raise ValueError(f"mode must be one of {DECIDE_MODES}")


@dataclass
class ModuleDecision:
    """What one reduction module saw and decided.

    ``nominal`` is the decision as drawn (or given) before overrides,
    ``mask`` what actually executed, and ``sampled`` marks tokens whose
    action genuinely came from the policy's distribution. Anchor protection
    clears ``sampled`` (the action was never drawn); the empty-set fallback
    keeps it set (a drawn Skip was overridden), so log-probability terms
    stay attached to every drawn action.
    """

    position: int
    survivors_in: np.ndarray  # original indices entering the module
    mask: np.ndarray  # executed Select mask over those survivors
    nominal: np.ndarray  # decision before overrides
    sampled: np.ndarray  # True where the action came from the policy
    probs: Optional[np.ndarray] = None  # Select probabilities when scored
    states: Optional[np.ndarray] = None  # entering states when scored

    @property
    def selected_count(self) -> int:
        """Policy-attributable Selects; overridden decisions are excluded."""
        return int(np.count_nonzero(self.nominal & self.sampled))


@dataclass
class ActionPlan:
    """Select/Skip decisions for every reduction module of one pass."""

    positions: tuple[int, ...]
    modules: list[ModuleDecision] = field(default_factory=list)
    fallback_used: bool = False

    @property
    def selected_count(self) -> int:
        return sum(m.selected_count for m in self.modules)

    @property
    def scored_by_policy(self) -> bool:
        return all(m.probs is not None for m in self.modules)


def fixed_plan(positions: Sequence[int], masks: Sequence[np.ndarray]) -> ActionPlan:
    """A plan carrying externally chosen masks (no policy involvement)."""
    positions = tuple(int(p) for p in positions)
    if len(positions) != len(masks):
        raise ValueError("one mask per reduction position required")
    modules = []
    for p, m in zip(positions, masks):
        mask = np.asarray(m, dtype=bool).reshape(-1)
        modules.append(
            ModuleDecision(
                position=p,
                survivors_in=np.empty(0, dtype=np.int64),  # filled at execution
                mask=mask,
                nominal=mask.copy(),
                sampled=np.ones(mask.size, dtype=bool),
            )
        )
    return ActionPlan(positions=positions, modules=modules)


def _plan_positions(cfg: ModelConfig, plan: Optional[ActionPlan]):
    positions = plan.positions if plan is not None else cfg.reduction_positions
    if plan is not None:
        prev = 0
        for p in positions:
            if not (1 <= p <= cfg.num_layers - 1) or p <= prev:
                raise ValueError("plan positions must be strictly increasing in [1, L-1]")
            prev = p
        return positions, {m.position: m for m in plan.modules}
    return positions, {p: t for t, p in enumerate(positions)}


def _module_decision(
    cfg: ModelConfig,
    given: Optional[ModuleDecision],
    probs_arr: Optional[np.ndarray],
    states_arr: np.ndarray,
    current: np.ndarray,
    mode: str,
    rng,
    threshold: float,
    executed: ActionPlan,
    termination: np.ndarray,
    position: int,
) -> np.ndarray:
    """Shared Select/Skip bookkeeping; returns the executed mask."""
    if given is not None:
        mask = given.mask.copy()
        if mask.size != current.size:
            raise ValueError(f"plan mask length {mask.size} != survivor count {current.size}")
        nominal = given.nominal.copy() if given.nominal.size == mask.size else mask.copy()
        sampled = (
            given.sampled.copy()
            if given.sampled.size == mask.size
            else np.ones(mask.size, dtype=bool)
        )
    else:
        mask = decide(probs_arr, mode=mode, rng=rng, threshold=threshold)
        nominal = mask.copy()
        sampled = np.ones(current.size, dtype=bool)
        if cfg.protect_anchor and current[0] == 0:
            sampled[0] = False
            mask[0] = True
            nominal[0] = True
    if not mask.any():
        # Survivors keep original order, so slot 0 is the anchor when it is
        # still present, else the earliest survivor. The drawn Skip stays in
        # `nominal`: its probability was real.
        mask[0] = True
        executed.fallback_used = True
    termination[current[~mask]] = position
    executed.modules.append(
        ModuleDecision(
            position=position,
            survivors_in=current.copy(),
            mask=mask,
            nominal=nominal,
            sampled=sampled,
            probs=probs_arr,
            states=states_arr,
        )
    )
    return mask


def reduced_forward(
    model: Model,
    token_ids,
    plan: Optional[ActionPlan] = None,
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
    threshold: float = 0.5,
    tape: Optional[Tape] = None,
    record_attention: bool = False,
) -> ForwardResult:
    """Run the layers with reduction modules at their configured positions.

    With `plan` the given masks are replayed; otherwise the policy scores
    each module's survivors and `mode` turns probabilities into actions.
    An all-Skip decision falls back to force-selecting the anchor (or the
    first survivor) and flags the plan. Without a tape this takes the
    value-only fast path.
    """
    cfg = model.config
    ids = check_token_ids(cfg, token_ids)
    if tape is None:
        return _reduced_forward_values(model, ids, plan, mode, rng, threshold, record_attention)
    pn = model.bind(tape)
    n = ids.size
    positions, by_position = _plan_positions(cfg, plan)

    H = embed(tape, pn, cfg, ids)
    hidden_nodes = [H]
    hidden = [H.value.copy()]
    survivors = [np.arange(n)]
    termination = np.full(n, cfg.num_layers, dtype=np.int64)
    attention = [] if record_attention else None
    current = np.arange(n)
    executed = ActionPlan(positions=tuple(int(p) for p in positions))

    for i in range(cfg.num_layers):
        if i in by_position:
            t = by_position[i]
            if plan is not None:
                given, probs_arr = t, None
            else:
                given = None
                probs_arr = policy_probs(tape, H, _policy_nodes_from(pn, t)).value[:, 0].copy()
            mask = _module_decision(
                cfg, given, probs_arr, H.value.copy(), current, mode, rng, threshold,
                executed, termination, i,
            )
            H = ad.gather_rows(H, np.flatnonzero(mask))
            current = current[mask]
        if record_attention:
            H, attn = layer_forward(tape, pn, cfg, i, H, record_attention=True)
            attention.append(attn)
        else:
            H = layer_forward(tape, pn, cfg, i, H)
        hidden_nodes.append(H)
        hidden.append(H.value.copy())
        survivors.append(current.copy())

    trace = LayerTrace(
        token_ids=ids,
        hidden=hidden,
        survivors=survivors,
        termination_layer=termination,
        plan=executed,
        attention=attention,
    )
    assembled = _assemble_nodes(trace, hidden_nodes)
    pred = predict(tape, pn, cfg, assembled)
    return ForwardResult(trace, hidden_nodes, assembled, pred, tape)


def shared_prefix(model: Model, ids: np.ndarray, record_attention: bool = False):
    """State after the layers preceding the first reduction position.

    Action sampling cannot influence these layers, so repeated rollouts of
    one example may reuse this value-path prefix.
    """
    cfg = model.config
    p = model.params
    ids = check_token_ids(cfg, ids)
    start = cfg.reduction_positions[0] if cfg.reduction_positions else cfg.num_layers
    H = embed_values(p, cfg, ids)
    hidden = [H.copy()]
    attention = [] if record_attention else None
    for i in range(start):
        if record_attention:
            H, attn = layer_values(p, cfg, i, H, record_attention=True)
            attention.append(attn)
        else:
            H = layer_values(p, cfg, i, H)
        hidden.append(H.copy())
    return ids, H, hidden, attention, start


def _reduced_forward_values(
    model: Model,
    ids: np.ndarray,
    plan: Optional[ActionPlan],
    mode: str,
    rng,
    threshold: float,
    record_attention: bool,
    prefix=None,
) -> ForwardResult:
    cfg = model.config
    p = model.params
    n = ids.size
    positions, by_position = _plan_positions(cfg, plan)

    if prefix is not None and plan is None:
        _, H, pre_hidden, pre_attention, start = prefix
        hidden = list(pre_hidden)
        attention = list(pre_attention) if record_attention else None
    else:
        H = embed_values(p, cfg, ids)
        hidden = [H.copy()]
        attention = [] if record_attention else None
        start = 0
    survivors = [np.arange(n) for _ in range(start + 1)]
    termination = np.full(n, cfg.num_layers, dtype=np.int64)
    current = np.arange(n)
    executed = ActionPlan(positions=tuple(int(q) for q in positions))

    for i in range(start, cfg.num_layers):
        if i in by_position:
            t = by_position[i]
            if plan is not None:
                given, probs_arr = t, None
            else:
                given = None
                probs_arr = policy_probs_values(p, t, H).copy()
            mask = _module_decision(
                cfg, given, probs_arr, H.copy(), current, mode, rng, threshold,
                executed, termination, i,
            )
            H = H[mask]
            current = current[mask]
        if record_attention:
            H, attn = layer_values(p, cfg, i, H, record_attention=True)
            attention.append(attn)
        else:
            H = layer_values(p, cfg, i, H)
        hidden.append(H.copy())
        survivors.append(current.copy())

    trace = LayerTrace(
        token_ids=ids,
        hidden=hidden,
        survivors=survivors,
        termination_layer=termination,
        plan=executed,
        attention=attention,
    )
    finals = assemble_final_states(trace)
    tape = Tape(recording=False)
    logits, probs = predict_values(p, cfg, finals)
    pred = wrap_prediction(tape, cfg, logits, probs)
    hidden_nodes = [Node(tape, h) for h in trace.hidden]
    return ForwardResult(trace, hidden_nodes, Node(tape, finals), pred, tape)


def _termination_groups(trace: LayerTrace):
    """Rows to pull from each layer, plus the permutation back to input order."""
    order = []
    pulls = []  # (layer, row indices within that layer's state)
    for layer in sorted(set(trace.termination_layer.tolist())):
        tokens = np.flatnonzero(trace.termination_layer == layer)
        surv = trace.survivors[layer]
        lookup = {int(tok): i for i, tok in enumerate(surv)}
        rows = np.array([lookup[int(tok)] for tok in tokens], dtype=np.int64)
        pulls.append((layer, rows))
        order.extend(tokens.tolist())
    perm = np.argsort(np.asarray(order, dtype=np.int64), kind="stable")
    return pulls, perm


def _assemble_nodes(trace: LayerTrace, hidden_nodes: list[Node]) -> Node:
    pulls, perm = _termination_groups(trace)
    parts = [ad.gather_rows(hidden_nodes[layer], rows) for layer, rows in pulls]
    stacked = parts[0] if len(parts) == 1 else ad.concat_rows(parts)
    if np.array_equal(perm, np.arange(perm.size)):
        return stacked
    return ad.gather_rows(stacked, perm)


def assemble_final_states(trace: LayerTrace) -> np.ndarray:
    """One row per original token: its termination-layer representation."""
    pulls, perm = _termination_groups(trace)
    stacked = np.concatenate([trace.hidden[layer][rows] for layer, rows in pulls], axis=0)
    return stacked[perm]


# ---------------------------------------------------------------------------
# diagnostics export
# ---------------------------------------------------------------------------


def trace_to_dict(trace: LayerTrace) -> dict:
    """JSON-ready digest of a reduced pass (masks, probabilities, fates)."""
    plan = trace.plan
    modules = []
    if plan is not None:
        for m in plan.modules:
            modules.append(
                {
                    "position": int(m.position),
                    "survivors_in": [int(x) for x in m.survivors_in],
                    "mask": [bool(x) for x in m.mask],
                    "nominal": [bool(x) for x in m.nominal],
                    "sampled": [bool(x) for x in m.sampled],
                    "probs": None if m.probs is None else [float(x) for x in m.probs],
                }
            )
    return {
        "tokens": [int(x) for x in trace.token_ids],
        "termination_layer": [int(x) for x in trace.termination_layer],
        "modules": modules,
        "fallback_used": bool(plan.fallback_used) if plan is not None else False,
    }


def export_trace_json(trace: LayerTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(trace_to_dict(trace), fh, indent=2)
        fh.write("\n")


def termination_tags(trace: LayerTrace) -> np.ndarray:
    """Per-token count of reduction modules survived (T = fully kept)."""
    plan = trace.plan
    positions = list(plan.positions) if plan is not None else []
    tags = np.full(trace.n_original, len(positions), dtype=np.int64)
    for t, p in enumerate(positions):
        tags[trace.termination_layer == p] = t
    return tags
