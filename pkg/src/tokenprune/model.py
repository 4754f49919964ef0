"""Transformer encoder with embedding, stacked layers, and prediction heads.

A layer computes M = LN(H + SelfAtt(H)); H' = LN(M + FFN(M)) with post-sum
layer normalization, multi-head scaled dot-product attention, and a
two-layer GeLU feed-forward block. The position-0 token is the anchor whose
final state feeds the classification head; the span head scores every
original position.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .seeding import substream

HEAD_KINDS = ("classification", "span")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and reduction-placement hyperparameters.

    ``reduction_positions`` are 0-based layer indices: reduction module t
    runs just before layer ``reduction_positions[t]``, i.e. after that many
    layers have executed. ``protect_anchor`` force-selects the position-0
    token at every module (its decision is excluded from selection counts).
    """

    num_layers: int = 6
    hidden: int = 32
    heads: int = 2
    ffn_inner: int = 64
    vocab_size: int = 256
    max_len: int = 64
    reduction_positions: tuple[int, ...] = (1, 3)
    head_kind: str = "classification"
    num_classes: int = 4
    policy_hidden: Optional[int] = None
    protect_anchor: bool = True

    def __post_init__(self):
        object.__setattr__(self, "reduction_positions", tuple(self.reduction_positions))
        if self.num_layers < 1 or self.hidden < 1 or self.heads < 1:
            raise ValueError("layer, hidden, and head counts must be >= 1")
        if self.hidden % self.heads != 0:
            raise ValueError("heads must divide hidden size")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.head_kind == "classification" and self.num_classes < 2:
            raise ValueError("classification needs at least 2 classes")
        prev = 0
        for p in self.reduction_positions:
            if not (1 <= p <= self.num_layers - 1):
                raise ValueError(
                    f"reduction position {p} outside [1, {self.num_layers - 1}]"
                )
            if p <= prev:
                raise ValueError("reduction positions must be strictly increasing")
            prev = p

    @property
    def num_modules(self) -> int:
        return len(self.reduction_positions)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def policy_width(self) -> int:
        return self.policy_hidden if self.policy_hidden is not None else self.hidden


@dataclass
class LayerTrace:
    """Per-layer hidden states and termination records for one forward pass.

    ``hidden[i]`` is the state after i layers (``hidden[0]`` is the
    embedding output); ``survivors[i]`` maps its rows to original token
    positions. ``termination_layer[j]`` is the index into ``hidden`` whose
    row is token j's final representation (``num_layers`` when never
    skipped).
    """

    token_ids: np.ndarray
    hidden: list[np.ndarray]
    survivors: list[np.ndarray]
    termination_layer: np.ndarray
    plan: object = None  # ActionPlan when the pass was reduced
    attention: Optional[list[list[np.ndarray]]] = None

    @property
    def n_original(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def num_layers(self) -> int:
        return len(self.hidden) - 1


@dataclass
class Prediction:
    """Task head output: logits and probabilities as graph nodes."""

    kind: str
    logits: tuple[Node, ...]  # classification: (1xC,); span: (1xn start, 1xn end)
    probs: tuple[Node, ...]

    def log_likelihood(self, label) -> Node:
        """Scalar node: log probability of the gold label."""
        if self.kind == "classification":
            return _pick_log(self.probs[0], int(label))
        start, end = label
        return ad.add(
            _pick_log(self.probs[0], int(start)), _pick_log(self.probs[1], int(end))
        )

    def prob_of(self, label) -> float:
        if self.kind == "classification":
            return float(self.probs[0].value[0, int(label)])
        start, end = label
        return float(self.probs[0].value[0, int(start)] * self.probs[1].value[0, int(end)])

    def predicted(self):
        if self.kind == "classification":
            return int(np.argmax(self.probs[0].value[0]))
        return (
            int(np.argmax(self.probs[0].value[0])),
            int(np.argmax(self.probs[1].value[0])),
        )


def safe_log(prob: Node) -> Node:
    """log with an underflow floor: the 1e-300 offset is absorbed exactly for
    any healthy probability and only keeps diverged runs finite long enough
    for the divergence guard to report them."""
    return ad.log(ad.add(prob, 1e-300))


def _pick_log(prob_row: Node, index: int) -> Node:
    onehot = np.zeros((1, prob_row.value.shape[1]))
    onehot[0, index] = 1.0
    return ad.sum_all(ad.mul(safe_log(prob_row), onehot))


@dataclass
class ForwardResult:
    """A forward pass: value trace plus the graph nodes needed for losses."""

    trace: LayerTrace
    hidden_nodes: list[Node]
    assembled: Node
    prediction: Prediction
    tape: Tape


class Model:
    """Immutable-config model: named float64 parameter arrays.

    Parameters are mutated in place by optimizers; concurrent forward passes
    over unchanged parameters are safe.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = substream(seed, "init")
        d, f, dh = config.hidden, config.ffn_inner, config.head_dim
        dp = config.policy_width
        p: dict[str, np.ndarray] = {}

        def normal(shape, std=0.02):
            return rng.normal(0.0, std, size=shape)

        p["embed.tok"] = normal((config.vocab_size, d))
        p["embed.pos"] = normal((config.max_len, d))
        p["embed.ln.g"] = np.ones((1, d))
        p["embed.ln.b"] = np.zeros((1, d))
        for i in range(config.num_layers):
            for h in range(config.heads):
                for kind in ("q", "k", "v"):
                    p[f"layer{i}.attn.{kind}{h}.w"] = normal((d, dh))
                    p[f"layer{i}.attn.{kind}{h}.b"] = np.zeros((1, dh))
                p[f"layer{i}.attn.o{h}.w"] = normal((dh, d))
            p[f"layer{i}.attn.o.b"] = np.zeros((1, d))
            p[f"layer{i}.ln1.g"] = np.ones((1, d))
            p[f"layer{i}.ln1.b"] = np.zeros((1, d))
            p[f"layer{i}.ffn.w1"] = normal((d, f))
            p[f"layer{i}.ffn.b1"] = np.zeros((1, f))
            p[f"layer{i}.ffn.w2"] = normal((f, d))
            p[f"layer{i}.ffn.b2"] = np.zeros((1, d))
            p[f"layer{i}.ln2.g"] = np.ones((1, d))
            p[f"layer{i}.ln2.b"] = np.zeros((1, d))
        if config.head_kind == "classification":
            p["head.cls.w"] = normal((d, config.num_classes))
            p["head.cls.b"] = np.zeros((1, config.num_classes))
        else:
            p["head.start.w"] = normal((1, d))
            p["head.start.b"] = np.zeros((1, 1))
            p["head.end.w"] = normal((1, d))
            p["head.end.b"] = np.zeros((1, 1))
        for t in range(config.num_modules):
            p[f"policy{t}.w1"] = normal((d, dp))
            p[f"policy{t}.b1"] = np.zeros((1, dp))
            p[f"policy{t}.w2"] = normal((dp, 1))
            # Select-biased start (sigmoid(3) ~ 0.95): an untrained policy
            # should pass tokens through; pruning pressure comes from the
            # reward's selection penalty, not from initialization.
            p[f"policy{t}.b2"] = np.full((1, 1), 3.0)
        return cls(config, p)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def policy_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("policy")]

    def digest(self, include_policy: bool = True, only_policy: bool = False) -> str:
        """Hex digest of parameter bytes; used by freeze-contract checks."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            is_policy = name.startswith("policy")
            if only_policy and not is_policy:
                continue
            if not include_policy and is_policy:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def bind(self, tape: Tape) -> dict[str, Node]:
        return {name: tape.param(name, arr) for name, arr in self.params.items()}


# ---------------------------------------------------------------------------
# forward building blocks
# ---------------------------------------------------------------------------


def _ln(pn: dict[str, Node], prefix: str, x: Node) -> Node:
    normed = ad.layer_norm_rows(x)
    return ad.add(ad.mul(normed, pn[f"{prefix}.g"]), pn[f"{prefix}.b"])


# ---------------------------------------------------------------------------
# value-only fast path: same math as the graph ops, plain arrays. Pass a
# recording Tape to the forward entry points when gradients are needed; the
# two paths are kept bit-identical (mirrored op order) and tested as such.
# ---------------------------------------------------------------------------


def _ln_values(p: dict[str, np.ndarray], prefix: str, x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    normed = xc * (1.0 / np.sqrt(var + 1e-12))
    return normed * p[f"{prefix}.g"] + p[f"{prefix}.b"]


def _softmax_values(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _gelu_values(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf as _erf

    return x * (0.5 * (1.0 + _erf(x / math.sqrt(2.0))))


def embed_values(p: dict[str, np.ndarray], cfg: ModelConfig, ids: np.ndarray) -> np.ndarray:
    return _ln_values(p, "embed.ln", p["embed.tok"][ids] + p["embed.pos"][: ids.size])


def layer_values(
    p: dict[str, np.ndarray],
    cfg: ModelConfig,
    index: int,
    H: np.ndarray,
    record_attention: bool = False,
):
    scale = 1.0 / math.sqrt(cfg.head_dim)
    prefix = f"layer{index}"
    attn_out = None
    attn_record = [] if record_attention else None
    for h in range(cfg.heads):
        q = H @ p[f"{prefix}.attn.q{h}.w"] + p[f"{prefix}.attn.q{h}.b"]
        k = H @ p[f"{prefix}.attn.k{h}.w"] + p[f"{prefix}.attn.k{h}.b"]
        v = H @ p[f"{prefix}.attn.v{h}.w"] + p[f"{prefix}.attn.v{h}.b"]
        weights = _softmax_values((q @ k.T) * scale)
        if record_attention:
            attn_record.append(weights.copy())
        proj = (weights @ v) @ p[f"{prefix}.attn.o{h}.w"]
        attn_out = proj if attn_out is None else attn_out + proj
    attn_out = attn_out + p[f"{prefix}.attn.o.b"]
    M = _ln_values(p, f"{prefix}.ln1", H + attn_out)
    inner = _gelu_values(M @ p[f"{prefix}.ffn.w1"] + p[f"{prefix}.ffn.b1"])
    out = _ln_values(p, f"{prefix}.ln2", M + (inner @ p[f"{prefix}.ffn.w2"] + p[f"{prefix}.ffn.b2"]))
    if record_attention:
        return out, attn_record
    return out


def predict_values(p: dict[str, np.ndarray], cfg: ModelConfig, finals: np.ndarray):
    """(logit rows, prob rows) as plain arrays, mirroring `predict`."""
    if cfg.head_kind == "classification":
        logits = finals[0:1] @ p["head.cls.w"] + p["head.cls.b"]
        return (logits,), (_softmax_values(logits),)
    start = p["head.start.w"] @ finals.T + p["head.start.b"]
    end = p["head.end.w"] @ finals.T + p["head.end.b"]
    return (start, end), (_softmax_values(start), _softmax_values(end))


def check_token_ids(cfg: ModelConfig, token_ids) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty token sequence")
    if ids.size > cfg.max_len:
        raise ValueError(f"sequence length {ids.size} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")
    return ids


def embed(tape: Tape, pn: dict[str, Node], cfg: ModelConfig, token_ids, positions=None) -> Node:
    """Token embedding plus position embedding, then layer normalization."""
    ids = check_token_ids(cfg, token_ids)
    if positions is None:
        positions = np.arange(ids.size)
    pos = np.asarray(positions, dtype=np.int64)
    if pos.min() < 0 or pos.max() >= cfg.max_len:
        raise ValueError("position outside supported range")
    tok = ad.gather_rows(pn["embed.tok"], ids)
    pos_emb = ad.gather_rows(pn["embed.pos"], pos)
    return _ln(pn, "embed.ln", ad.add(tok, pos_emb))


def layer_forward(
    tape: Tape,
    pn: dict[str, Node],
    cfg: ModelConfig,
    index: int,
    H: Node,
    record_attention: bool = False,
):
    """One transformer layer; optionally returns per-head attention values."""
    n = H.value.shape[0]
    if n == 0:
        raise ValueError("transformer layer received an empty sequence")
    scale = 1.0 / math.sqrt(cfg.head_dim)
    prefix = f"layer{index}"

    attn_out = None
    attn_record = [] if record_attention else None
    for h in range(cfg.heads):
        q = ad.add(ad.matmul(H, pn[f"{prefix}.attn.q{h}.w"]), pn[f"{prefix}.attn.q{h}.b"])
        k = ad.add(ad.matmul(H, pn[f"{prefix}.attn.k{h}.w"]), pn[f"{prefix}.attn.k{h}.b"])
        v = ad.add(ad.matmul(H, pn[f"{prefix}.attn.v{h}.w"]), pn[f"{prefix}.attn.v{h}.b"])
        scores = ad.mul(ad.matmul(q, k, transpose_b=True), scale)
        weights = ad.softmax_rows(scores)
        if record_attention:
            attn_record.append(weights.value.copy())
        ctx = ad.matmul(weights, v)
        proj = ad.matmul(ctx, pn[f"{prefix}.attn.o{h}.w"])
        attn_out = proj if attn_out is None else ad.add(attn_out, proj)
    attn_out = ad.add(attn_out, pn[f"{prefix}.attn.o.b"])

    M = _ln(pn, f"{prefix}.ln1", ad.add(H, attn_out))
    inner = ad.gelu(ad.add(ad.matmul(M, pn[f"{prefix}.ffn.w1"]), pn[f"{prefix}.ffn.b1"]))
    ffn_out = ad.add(ad.matmul(inner, pn[f"{prefix}.ffn.w2"]), pn[f"{prefix}.ffn.b2"])
    out = _ln(pn, f"{prefix}.ln2", ad.add(M, ffn_out))
    if record_attention:
        return out, attn_record
    return out


def predict(tape: Tape, pn: dict[str, Node], cfg: ModelConfig, finals: Node) -> Prediction:
    """Task distribution from assembled final states (one row per token)."""
    if finals.value.shape[0] < 1:
        raise ValueError("prediction requires at least the anchor state")
    if cfg.head_kind == "classification":
        anchor = ad.gather_rows(finals, [0])
        logits = ad.add(ad.matmul(anchor, pn["head.cls.w"]), pn["head.cls.b"])
        return Prediction("classification", (logits,), (ad.softmax_rows(logits),))
    start = ad.add(ad.matmul(pn["head.start.w"], finals, transpose_b=True), pn["head.start.b"])
    end = ad.add(ad.matmul(pn["head.end.w"], finals, transpose_b=True), pn["head.end.b"])
    return Prediction(
        "span", (start, end), (ad.softmax_rows(start), ad.softmax_rows(end))
    )


def full_forward(
    model: Model,
    token_ids,
    tape: Optional[Tape] = None,
    record_attention: bool = False,
) -> ForwardResult:
    """Run every layer with no reduction; all tokens terminate at the top.

    Without a tape this takes the value-only fast path; pass a recording
    Tape to build the differentiable graph instead.
    """
    cfg = model.config
    ids = check_token_ids(cfg, token_ids)
    n = ids.size
    if tape is None:
        return _full_forward_values(model, ids, record_attention)
    pn = model.bind(tape)
    H = embed(tape, pn, cfg, ids)
    hidden_nodes = [H]
    hidden = [H.value.copy()]
    survivors = [np.arange(n)]
    attention = [] if record_attention else None
    for i in range(cfg.num_layers):
        if record_attention:
            H, attn = layer_forward(tape, pn, cfg, i, H, record_attention=True)
            attention.append(attn)
        else:
            H = layer_forward(tape, pn, cfg, i, H)
        hidden_nodes.append(H)
        hidden.append(H.value.copy())
        survivors.append(np.arange(n))
    trace = LayerTrace(
        token_ids=ids,
        hidden=hidden,
        survivors=survivors,
        termination_layer=np.full(n, cfg.num_layers, dtype=np.int64),
        plan=None,
        attention=attention,
    )
    pred = predict(tape, pn, cfg, H)
    return ForwardResult(trace, hidden_nodes, H, pred, tape)


def wrap_prediction(tape: Tape, cfg: ModelConfig, logits, probs) -> Prediction:
    kind = cfg.head_kind
    return Prediction(
        kind,
        tuple(Node(tape, x) for x in logits),
        tuple(Node(tape, x) for x in probs),
    )


def _full_forward_values(model: Model, ids: np.ndarray, record_attention: bool) -> ForwardResult:
    cfg = model.config
    p = model.params
    n = ids.size
    H = embed_values(p, cfg, ids)
    hidden = [H.copy()]
    survivors = [np.arange(n)]
    attention = [] if record_attention else None
    for i in range(cfg.num_layers):
        if record_attention:
            H, attn = layer_values(p, cfg, i, H, record_attention=True)
            attention.append(attn)
        else:
            H = layer_values(p, cfg, i, H)
        hidden.append(H.copy())
        survivors.append(np.arange(n))
    trace = LayerTrace(
        token_ids=ids,
        hidden=hidden,
        survivors=survivors,
        termination_layer=np.full(n, cfg.num_layers, dtype=np.int64),
        plan=None,
        attention=attention,
    )
    tape = Tape(recording=False)
    logits, probs = predict_values(p, cfg, H)
    pred = wrap_prediction(tape, cfg, logits, probs)
    hidden_nodes = [Node(tape, h) for h in trace.hidden]
    return ForwardResult(trace, hidden_nodes, hidden_nodes[-1], pred, tape)


def config_to_kv(cfg: ModelConfig) -> dict[str, str]:
    """Flat text form of a model configuration."""
    out = {}
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            out[f.name] = ",".join(str(x) for x in v)
        elif v is None:
            out[f.name] = "none"
        elif isinstance(v, bool):
            out[f.name] = "true" if v else "false"
        else:
            out[f.name] = str(v)
    return out


def config_from_kv(kv: dict[str, str]) -> ModelConfig:
    kwargs = {}
    known = {f.name for f in fields(ModelConfig)}
    for key, raw in kv.items():
        if key not in known:
            raise ValueError(f"unknown model config key {key!r}")
        kwargs[key] = _parse_field(key, raw)
    return ModelConfig(**kwargs)


def _parse_field(key: str, raw: str):
    if key == "reduction_positions":
        raw = raw.strip()
        return tuple(int(x) for x in raw.split(",") if x != "") if raw else ()
    if key == "head_kind":
        return raw
    if key == "policy_hidden":
        return None if raw == "none" else int(raw)
    if key == "protect_anchor":
        return raw == "true"
    return int(raw)
