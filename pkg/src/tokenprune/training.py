"""Reward computation, policy-gradient training, imitation warmup, and
knowledge distillation, arranged as a three-stage pipeline.

Stage 1 fits the transformer and head on the task objective. Stage 2
freezes everything except the reduction policies and trains them with
score-function policy gradients; the first fraction of its steps instead
imitate top-K masks built from residual importance, with K set to the
policy's own expected Select count. Stage 3 unfreezes all parameters and
trains against the unpruned teacher's softened outputs plus the
policy-gradient objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .errors import DivergenceError
from .model import ForwardResult, Model, Prediction, full_forward
from .profiling import trace_flops
from .reduction import ActionPlan, PolicyNodes, policy_probs, reduced_forward
from .seeding import substream
from .strategies import residual_importance, top_k_mask
from .synthetic import SyntheticExample, selection_recall

LOG_CLAMP = -1e9
IMITATION_DEFAULTS = {"classification": 0.5, "span": 0.2}


@dataclass
class RewardBreakdown:
    """Reward for one sampled pass: log-likelihood minus a per-token penalty
    on the number of policy-chosen Selects (forced overrides excluded)."""

    log_likelihood: float
    selected_count: int
    penalty: float
    clamped: bool = False
    total: float = field(init=False)

    def __post_init__(self):
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")
        self.total = self.log_likelihood - self.penalty * self.selected_count


@dataclass
class TrainConfig:
    """Hyperparameters for the three-stage pipeline."""

    epochs: int = 2
    batch_size: int = 16
    num_action_samples: int = 8
    imitation_fraction: Optional[float] = None  # default depends on head kind
    penalty: float = 0.01
    lr_stage1: float = 1e-3
    lr_policy: float = 1e-2
    lr_imitation: Optional[float] = None  # default: lr_policy / 3
    lr_stage3: float = 5e-4
    warmup_fraction: float = 0.1
    kd_temperature: float = 2.0
    kd_alpha: float = 0.5
    rl_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.num_action_samples < 1:
            raise ValueError("epochs, batch_size, and sample counts must be >= 1")
        if self.imitation_fraction is not None and not (0.0 <= self.imitation_fraction <= 1.0):
            raise ValueError("imitation_fraction must lie in [0, 1]")
        if not (0.0 <= self.warmup_fraction <= 1.0):
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.penalty < 0 or self.kd_temperature <= 0:
            raise ValueError("penalty must be >= 0 and temperature > 0")
        if not (0.0 <= self.kd_alpha <= 1.0):
            raise ValueError("kd_alpha must lie in [0, 1]")

    @property
    def stage2_epochs(self) -> int:
        return (self.epochs + 2) // 2  # ceil((epochs + 1) / 2)

    @property
    def resolved_lr_imitation(self) -> float:
        return self.lr_imitation if self.lr_imitation is not None else self.lr_policy / 3.0

    def resolved_imitation_fraction(self, head_kind: str) -> float:
        if self.imitation_fraction is not None:
            return self.imitation_fraction
        return IMITATION_DEFAULTS[head_kind]


class Adam:
    """Adaptive-moment optimizer over a named parameter subset, in place.

    `warmup_steps` linearly scales the rate up from zero over the first
    steps of a stage.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        warmup_steps: int = 0,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup_steps = warmup_steps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        rate = self.lr
        if self.warmup_steps > 0 and self.t <= self.warmup_steps:
            rate *= self.t / self.warmup_steps
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= rate * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def compute_reward(result: ForwardResult, label, penalty: float) -> RewardBreakdown:
    """Reward of one pass: gold-label log-probability minus the selection
    penalty. Zero probability is clamped with a diagnostic flag."""
    p = result.prediction.prob_of(label)
    clamped = p <= 0.0
    ll = LOG_CLAMP if clamped else math.log(p)
    count = result.trace.plan.selected_count if result.trace.plan is not None else 0
    return RewardBreakdown(ll, count, penalty, clamped)


def task_loss_node(pred: Prediction, label) -> Node:
    return ad.mul(pred.log_likelihood(label), -1.0)


# ---------------------------------------------------------------------------
# policy-gradient machinery
# ---------------------------------------------------------------------------


def _bind_policies(tape: Tape, model: Model) -> list[PolicyNodes]:
    out = []
    for t in range(model.config.num_modules):
        out.append(
            PolicyNodes(
                tape.param(f"policy{t}.w1", model.params[f"policy{t}.w1"]),
                tape.param(f"policy{t}.b1", model.params[f"policy{t}.b1"]),
                tape.param(f"policy{t}.w2", model.params[f"policy{t}.w2"]),
                tape.param(f"policy{t}.b2", model.params[f"policy{t}.b2"]),
            )
        )
    return out


def _one_minus(p: Node) -> Node:
    return ad.add(ad.mul(p, -1.0), 1.0)


def _bce_terms(p: Node, keep_idx: np.ndarray, drop_idx: np.ndarray) -> Node:
    """sum(log p[keep]) + sum(log(1 - p[drop])), gathering first so entries
    saturated on the other side never hit log(0)."""
    from .model import safe_log

    total = None
    if keep_idx.size:
        total = ad.sum_all(safe_log(ad.gather_rows(p, keep_idx)))
    if drop_idx.size:
        term = ad.sum_all(safe_log(_one_minus(ad.gather_rows(p, drop_idx))))
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.mul(ad.sum_all(p), 0.0)
    return total


def plan_log_prob_node(tape: Tape, pnodes: list[PolicyNodes], plan: ActionPlan) -> Node:
    """Scalar node: sum of log pi(action) over the plan's drawn decisions.

    Overridden-but-drawn actions (empty-set fallback) keep their terms;
    never-drawn ones (anchor protection) contribute nothing.
    """
    total = None
    for t, m in enumerate(plan.modules):
        if m.states is None:
            raise ValueError("plan lacks recorded states; sample it from the policy")
        p = policy_probs(tape, tape.const(m.states), pnodes[t])
        term = _bce_terms(
            p,
            np.flatnonzero(m.nominal & m.sampled),
            np.flatnonzero(~m.nominal & m.sampled),
        )
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("plan has no reduction modules")
    return total


def sample_rollouts(
    model: Model, example: SyntheticExample, cfg: TrainConfig, rng: np.random.Generator
) -> tuple[list[ActionPlan], list[RewardBreakdown]]:
    """Draw the configured number of action plans and score each one.

    The layers before the first reduction module cannot depend on the
    sampled actions, so that prefix is computed once and shared.
    """
    from .model import check_token_ids
    from .reduction import _reduced_forward_values, shared_prefix

    ids = check_token_ids(model.config, example.tokens)
    prefix = shared_prefix(model, ids)
    plans, rewards = [], []
    for _ in range(cfg.num_action_samples):
        result = _reduced_forward_values(
            model, ids, None, "sample", rng, 0.5, False, prefix=prefix
        )
        plans.append(result.trace.plan)
        rewards.append(compute_reward(result, example.label, cfg.penalty))
    return plans, rewards


def reinforce_batch_grads(
    model: Model,
    samples: Sequence[tuple[list[ActionPlan], list[RewardBreakdown]]],
    batch_size: int,
) -> tuple[dict[str, np.ndarray], float]:
    """Policy gradients of the negated objective (a descent direction).

    Per example the baseline is the mean of that example's sampled rewards
    and the advantage-weighted log-probability sum is normalized by K-1,
    which keeps the mean-baseline estimator unbiased. One sample, or equal
    rewards across samples, yields a zero update.
    """
    tape = Tape()
    pnodes = _bind_policies(tape, model)
    weighted: Optional[Node] = None
    reward_values = []
    for plans, rewards in samples:
        totals = np.array([r.total for r in rewards])
        reward_values.extend(totals.tolist())
        baseline = totals.mean()
        denom = max(len(plans) - 1, 1)
        for plan, total in zip(plans, totals):
            w = (total - baseline) / denom
            if w == 0.0:
                continue
            term = ad.mul(plan_log_prob_node(tape, pnodes, plan), w)
            weighted = term if weighted is None else ad.add(weighted, term)
    mean_reward = float(np.mean(reward_values)) if reward_values else 0.0
    if weighted is None:
        zero = {name: np.zeros_like(node.value) for name, node in tape.params.items()}
        return zero, mean_reward
    loss = ad.mul(weighted, -1.0 / batch_size)
    return ad.grad(tape, loss), mean_reward


def reinforce_step(
    model: Model,
    batch: Sequence[SyntheticExample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer: Adam,
) -> float:
    """One policy-gradient ascent step on a batch; returns the mean reward."""
    samples = [sample_rollouts(model, ex, cfg, rng) for ex in batch]
    grads, mean_reward = reinforce_batch_grads(model, samples, len(batch))
    optimizer.step(grads)
    return mean_reward


# ---------------------------------------------------------------------------
# imitation warmup
# ---------------------------------------------------------------------------


@dataclass
class ImitationTarget:
    position: int
    module_index: int
    states: np.ndarray
    mask: np.ndarray


def imitation_targets(
    model: Model,
    example: SyntheticExample,
    residual_scores: Optional[np.ndarray] = None,
) -> list[ImitationTarget]:
    """Per-module top-K keep masks from residual importance.

    K is the policy's expected Select count over the module's survivors
    (rounded half-up, clamped to at least one); the masks are executed in
    sequence so each module sees the survivors the previous one kept.
    """
    cfg = model.config
    if residual_scores is None:
        residual_scores = residual_importance(model, example.tokens, example.label).scores
    from .model import check_token_ids, embed_values, layer_values
    from .reduction import policy_probs_values

    ids = check_token_ids(cfg, example.tokens)
    H = embed_values(model.params, cfg, ids)
    current = np.arange(ids.size)
    positions = cfg.reduction_positions
    targets = []
    done = 0
    for i in range(cfg.num_layers):
        if done == len(positions):
            break
        if i in positions:
            t = positions.index(i)
            probs = policy_probs_values(model.params, t, H)
            k = int(math.floor(probs.sum() + 0.5))
            k = min(max(k, 1), current.size)
            mask = top_k_mask(residual_scores[current], k, force_anchor=current[0] == 0)
            targets.append(
                ImitationTarget(position=i, module_index=t, states=H.copy(), mask=mask)
            )
            H = H[mask]
            current = current[mask]
            done += 1
        if done == len(positions):
            break
        H = layer_values(model.params, cfg, i, H)
    return targets


def imitation_batch_grads(
    model: Model, target_sets: Sequence[list[ImitationTarget]]
) -> tuple[dict[str, np.ndarray], float]:
    """Binary cross-entropy between policy probabilities and target masks."""
    tape = Tape()
    pnodes = _bind_policies(tape, model)
    total: Optional[Node] = None
    count = 0
    for targets in target_sets:
        for tgt in targets:
            p = policy_probs(tape, tape.const(tgt.states), pnodes[tgt.module_index])
            term = _bce_terms(p, np.flatnonzero(tgt.mask), np.flatnonzero(~tgt.mask))
            total = term if total is None else ad.add(total, term)
            count += tgt.mask.size
    if total is None:
        raise ValueError("no imitation targets in batch")
    loss = ad.mul(total, -1.0 / count)
    return ad.grad(tape, loss), float(loss.value[0, 0])


def imitation_step(
    model: Model,
    batch: Sequence[SyntheticExample],
    optimizer: Adam,
    score_cache: Optional[dict] = None,
    keys: Optional[Sequence] = None,
) -> float:
    """One supervised warmup step on a batch; returns the mean BCE loss."""
    target_sets = []
    for j, ex in enumerate(batch):
        scores = None
        if score_cache is not None and keys is not None:
            scores = score_cache.get(keys[j])
            if scores is None:
                scores = residual_importance(model, ex.tokens, ex.label).scores
                score_cache[keys[j]] = scores
        target_sets.append(imitation_targets(model, ex, residual_scores=scores))
    grads, loss = imitation_batch_grads(model, target_sets)
    optimizer.step(grads)
    return loss


# ---------------------------------------------------------------------------
# knowledge distillation
# ---------------------------------------------------------------------------


def _softmax_value(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def kd_loss(
    student_logits: Node,
    teacher_logits: np.ndarray,
    gold: int,
    tau: float = 2.0,
    alpha: float = 0.5,
) -> Node:
    """alpha * tau^2 * KL(teacher_soft || student_soft) + (1 - alpha) * CE."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.value.shape:
        raise ValueError("student and teacher logits must share a shape")
    from .model import safe_log

    t_soft = _softmax_value(teacher_logits / tau)
    t_entropy = float((t_soft * np.log(t_soft + 1e-300)).sum())
    log_q = safe_log(ad.softmax_rows(ad.mul(student_logits, 1.0 / tau)))
    cross = ad.sum_all(ad.mul(log_q, t_soft))
    kl = ad.add(ad.mul(cross, -1.0), t_entropy)

    onehot = np.zeros_like(teacher_logits)
    onehot[0, int(gold)] = 1.0
    ce = ad.mul(ad.sum_all(ad.mul(safe_log(ad.softmax_rows(student_logits)), onehot)), -1.0)
    return ad.add(ad.mul(kl, alpha * tau * tau), ad.mul(ce, 1.0 - alpha))


def distillation_loss_node(
    student: Prediction, teacher_logits: tuple[np.ndarray, ...], label, cfg: TrainConfig
) -> Node:
    """KD loss over the head's logit rows (two rows for span heads)."""
    if student.kind == "classification":
        return kd_loss(
            student.logits[0], teacher_logits[0], int(label), cfg.kd_temperature, cfg.kd_alpha
        )
    start_loss = kd_loss(
        student.logits[0], teacher_logits[0], int(label[0]), cfg.kd_temperature, cfg.kd_alpha
    )
    end_loss = kd_loss(
        student.logits[1], teacher_logits[1], int(label[1]), cfg.kd_temperature, cfg.kd_alpha
    )
    return ad.add(start_loss, end_loss)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    metric: float
    mean_nll: float
    mean_selected: float
    mean_speedup: float
    mean_recall: Optional[float]
    rows: list[dict] = field(default_factory=list)


def evaluate(
    model: Model,
    examples: Sequence[SyntheticExample],
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
    threshold: float = 0.5,
) -> EvalResult:
    """Score a dataset in one of three modes: "full" (no reduction),
    "greedy" (deterministic policy), or "sample" (seeded stochastic)."""
    cfg = model.config
    hits = 0
    nlls, selected, speedups, recalls = [], [], [], []
    rows = []
    for idx, ex in enumerate(examples):
        if mode == "full":
            result = full_forward(model, ex.tokens)
            selected.append(cfg.num_modules * ex.n)
        else:
            result = reduced_forward(model, ex.tokens, mode=mode, rng=rng, threshold=threshold)
            selected.append(result.trace.plan.selected_count)
        if result.prediction.predicted() == ex.label:
            hits += 1
        p = result.prediction.prob_of(ex.label)
        nlls.append(-math.log(max(p, 1e-300)))
        report = trace_flops(result.trace, cfg)
        speedups.append(report.speedup)
        recalls.append(selection_recall(result.trace, ex.signal))
        rows.append(
            {
                "example_id": idx,
                "orig_len": ex.n,
                "flops": report.total,
                "reference_flops": report.reference_total,
                "speedup": report.speedup,
            }
        )
    return EvalResult(
        metric=hits / len(examples),
        mean_nll=float(np.mean(nlls)),
        mean_selected=float(np.mean(selected)),
        mean_speedup=float(np.mean(speedups)),
        mean_recall=float(np.mean(recalls)),
        rows=rows,
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    model: Model
    teacher: Optional[Model]
    history: list[dict]


def _chance_nll(model: Model, examples: Sequence[SyntheticExample]) -> float:
    if model.config.head_kind == "classification":
        return math.log(model.config.num_classes)
    mean_len = float(np.mean([ex.n for ex in examples]))
    return 2.0 * math.log(mean_len)


def _record(
    history: list[dict],
    history_path,
    stage: int,
    epoch: int,
    dev: EvalResult,
    reward_mean: Optional[float],
) -> dict:
    row = {
        "stage": stage,
        "epoch": epoch,
        "dev_metric": dev.metric,
        "mean_selected": dev.mean_selected,
        "flops_speedup": dev.mean_speedup,
        "reward_mean": reward_mean,
    }
    history.append(row)
    if history_path is not None:
        with open(history_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row) + "\n")
    return row


def _check_divergence(dev_nll: float, baseline_nll: float, floor: float, where: str) -> None:
    if not math.isfinite(dev_nll):
        raise DivergenceError(f"{where}: dev loss is not finite")
    limit = 10.0 * max(baseline_nll, 0.5 * floor)
    if dev_nll > limit:
        raise DivergenceError(
            f"{where}: dev NLL {dev_nll:.4f} exceeds 10x the unpruned level "
            f"({baseline_nll:.4f}, guard limit {limit:.4f})"
        )


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, order.size, batch_size):
        yield order[lo : lo + batch_size]


def run_stage1(
    model: Model,
    train: Sequence[SyntheticExample],
    dev: Sequence[SyntheticExample],
    cfg: TrainConfig,
    history: list[dict],
    history_path=None,
    log: Optional[Callable[[str], None]] = None,
) -> None:
    """Task-objective training of the transformer and head."""
    trainable = {k: v for k, v in model.params.items() if not k.startswith("policy")}
    total_steps = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    adam = Adam(
        trainable, cfg.lr_stage1, warmup_steps=round(cfg.warmup_fraction * total_steps)
    )
    data_rng = substream(cfg.seed, "data-stage1")
    for epoch in range(cfg.epochs):
        order = data_rng.permutation(len(train))
        for batch_idx in _batches(order, cfg.batch_size):
            grads: dict[str, np.ndarray] = {}
            for j in batch_idx:
                ex = train[j]
                tape = Tape()
                result = full_forward(model, ex.tokens, tape=tape)
                loss = task_loss_node(result.prediction, ex.label)
                for name, g in ad.grad(tape, loss).items():
                    if name in grads:
                        grads[name] += g
                    else:
                        grads[name] = g
                if not math.isfinite(loss.value[0, 0]):
                    raise DivergenceError("stage 1: training loss is not finite")
            scale = 1.0 / batch_idx.size
            adam.step({k: v * scale for k, v in grads.items()})
        dev_eval = evaluate(model, dev, mode="full")
        _record(history, history_path, 1, epoch, dev_eval, None)
        if log:
            log(
                f"stage 1 epoch {epoch}: dev acc {dev_eval.metric:.4f} "
                f"nll {dev_eval.mean_nll:.4f}"
            )


def run_stage2(
    model: Model,
    train: Sequence[SyntheticExample],
    dev: Sequence[SyntheticExample],
    cfg: TrainConfig,
    history: list[dict],
    history_path=None,
    log: Optional[Callable[[str], None]] = None,
) -> None:
    """Frozen-transformer policy training: imitation warmup then REINFORCE.

    The warmup uses a gentler rate and its own optimizer state: it should
    point the policy at important tokens without saturating probabilities,
    leaving the policy-gradient phase free to push either way.
    """
    policy_params = {k: v for k, v in model.params.items() if k.startswith("policy")}
    imitation_adam = Adam(policy_params, cfg.resolved_lr_imitation)
    rl_adam = Adam(policy_params, cfg.lr_policy)
    data_rng = substream(cfg.seed, "data-stage2")
    rollout_rng = substream(cfg.seed, "rollout-stage2")
    baseline = evaluate(model, dev, mode="full")
    floor = _chance_nll(model, dev)
    frac = cfg.resolved_imitation_fraction(model.config.head_kind)
    batches_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.stage2_epochs * batches_per_epoch
    imitation_steps = round(frac * total_steps)
    score_cache: dict = {}  # transformer is frozen, residual scores are reusable
    step = 0
    for epoch in range(cfg.stage2_epochs):
        rewards = []
        order = data_rng.permutation(len(train))
        for batch_idx in _batches(order, cfg.batch_size):
            batch = [train[j] for j in batch_idx]
            if step < imitation_steps:
                imitation_step(model, batch, imitation_adam, score_cache, keys=batch_idx.tolist())
            else:
                rewards.append(reinforce_step(model, batch, cfg, rollout_rng, rl_adam))
            step += 1
        dev_eval = evaluate(model, dev, mode="greedy")
        reward_mean = float(np.mean(rewards)) if rewards else None
        _record(history, history_path, 2, epoch, dev_eval, reward_mean)
        _check_divergence(dev_eval.mean_nll, baseline.mean_nll, floor, f"stage 2 epoch {epoch}")
        if log:
            log(
                f"stage 2 epoch {epoch}: dev acc {dev_eval.metric:.4f} "
                f"selected {dev_eval.mean_selected:.1f} speedup {dev_eval.mean_speedup:.2f}"
            )


def run_stage3(
    model: Model,
    teacher: Model,
    train: Sequence[SyntheticExample],
    dev: Sequence[SyntheticExample],
    cfg: TrainConfig,
    history: list[dict],
    history_path=None,
    log: Optional[Callable[[str], None]] = None,
) -> None:
    """Joint training: distillation from the unpruned teacher plus the
    policy-gradient objective, all parameters free."""
    adam = Adam(model.params, cfg.lr_stage3)
    data_rng = substream(cfg.seed, "data-stage3")
    rollout_rng = substream(cfg.seed, "rollout-stage3")
    baseline = evaluate(teacher, dev, mode="full")
    floor = _chance_nll(model, dev)
    teacher_cache: dict[int, tuple[np.ndarray, ...]] = {}

    def teacher_logits(index: int, ex: SyntheticExample) -> tuple[np.ndarray, ...]:
        cached = teacher_cache.get(index)
        if cached is None:
            res = full_forward(teacher, ex.tokens)
            cached = tuple(n.value.copy() for n in res.prediction.logits)
            teacher_cache[index] = cached
        return cached

    for epoch in range(cfg.epochs):
        rewards = []
        order = data_rng.permutation(len(train))
        for batch_idx in _batches(order, cfg.batch_size):
            batch = [train[j] for j in batch_idx]
            samples = [sample_rollouts(model, ex, cfg, rollout_rng) for ex in batch]
            rl_grads, reward_mean = reinforce_batch_grads(model, samples, len(batch))
            rewards.append(reward_mean)
            grads: dict[str, np.ndarray] = {}
            for j, ex in zip(batch_idx, batch):
                # distill through the plan that inference will actually use:
                # the current policy's greedy reduction
                greedy_plan = reduced_forward(model, ex.tokens, mode="greedy").trace.plan
                tape = Tape()
                student = reduced_forward(model, ex.tokens, plan=greedy_plan, tape=tape)
                loss = distillation_loss_node(
                    student.prediction, teacher_logits(int(j), ex), ex.label, cfg
                )
                if not math.isfinite(loss.value[0, 0]):
                    raise DivergenceError("stage 3: training loss is not finite")
                for name, g in ad.grad(tape, loss).items():
                    if name in grads:
                        grads[name] += g
                    else:
                        grads[name] = g
            scale = 1.0 / batch_idx.size
            combined = {k: v * scale for k, v in grads.items()}
            for name, g in rl_grads.items():
                combined[name] = combined.get(name, 0.0) + cfg.rl_weight * g
            adam.step(combined)
        dev_eval = evaluate(model, dev, mode="greedy")
        _record(history, history_path, 3, epoch, dev_eval, float(np.mean(rewards)))
        _check_divergence(dev_eval.mean_nll, baseline.mean_nll, floor, f"stage 3 epoch {epoch}")
        if log:
            log(
                f"stage 3 epoch {epoch}: dev acc {dev_eval.metric:.4f} "
                f"selected {dev_eval.mean_selected:.1f} speedup {dev_eval.mean_speedup:.2f}"
            )


def train_pipeline(
    model: Model,
    train: Sequence[SyntheticExample],
    dev: Sequence[SyntheticExample],
    cfg: TrainConfig,
    history_path=None,
    stages: Sequence[int] = (1, 2, 3),
    teacher: Optional[Model] = None,
    log: Optional[Callable[[str], None]] = None,
) -> PipelineResult:
    """Run the requested stages in order; returns the model, the teacher
    snapshot used for distillation, and the per-epoch history."""
    stages = tuple(sorted(set(int(s) for s in stages)))
    if any(s not in (1, 2, 3) for s in stages):
        raise ValueError("stages must be a subset of {1, 2, 3}")
    history: list[dict] = []
    if 1 in stages:
        run_stage1(model, train, dev, cfg, history, history_path, log)
    if teacher is None:
        teacher = model.copy()
    if 2 in stages:
        run_stage2(model, train, dev, cfg, history, history_path, log)
    if 3 in stages:
        run_stage3(model, teacher, train, dev, cfg, history, history_path, log)
    return PipelineResult(model=model, teacher=teacher, history=history)


def train_config_to_kv(cfg: TrainConfig) -> dict[str, str]:
    out = {}
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        out[f.name] = "none" if v is None else str(v)
    return out


def train_config_from_kv(kv: dict[str, str]) -> TrainConfig:
    kwargs = {}
    known = {f.name: f for f in fields(TrainConfig)}
    for key, raw in kv.items():
        if key not in known:
            raise ValueError(f"unknown training config key {key!r}")
        if raw == "none":
            kwargs[key] = None
            continue
        if key in ("epochs", "batch_size", "num_action_samples", "seed"):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return TrainConfig(**kwargs)
