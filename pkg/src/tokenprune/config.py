"""Flat key=value experiment configuration.

One diff-friendly text format serves config files, the checkpoint's
embedded configuration, and the resolved-config record written next to
every command's outputs. Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

from dataclasses import fields

from .errors import UsageError
from .model import ModelConfig, config_from_kv, config_to_kv
from .training import TrainConfig, train_config_from_kv, train_config_to_kv

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
PATH_KEYS = ("train_path", "dev_path", "out_dir")
KNOWN_KEYS = frozenset(MODEL_KEYS + TRAIN_KEYS + PATH_KEYS)


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"config line {lineno} is not key=value: {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in out:
            raise UsageError(f"config key {key!r} appears twice")
        out[key] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_kv_text(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc


def split_known(kv: dict[str, str]) -> tuple[dict[str, str], dict[str, str], dict[str, str]]:
    """Partition keys into model / training / path groups, rejecting others."""
    unknown = sorted(set(kv) - KNOWN_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    model = {k: v for k, v in kv.items() if k in MODEL_KEYS}
    train = {k: v for k, v in kv.items() if k in TRAIN_KEYS}
    paths = {k: v for k, v in kv.items() if k in PATH_KEYS}
    return model, train, paths


def build_configs(kv: dict[str, str]) -> tuple[ModelConfig, TrainConfig, dict[str, str]]:
    model_kv, train_kv, paths = split_known(kv)
    try:
        model_cfg = config_from_kv(model_kv)
        train_cfg = train_config_from_kv(train_kv)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return model_cfg, train_cfg, paths


def resolved_config_text(
    model_cfg: ModelConfig, train_cfg: TrainConfig, paths: dict[str, str] | None = None
) -> str:
    lines = []
    for k, v in config_to_kv(model_cfg).items():
        lines.append(f"{k}={v}")
    for k, v in train_config_to_kv(train_cfg).items():
        lines.append(f"{k}={v}")
    for k in PATH_KEYS:
        if paths and k in paths:
            lines.append(f"{k}={paths[k]}")
    return "\n".join(lines) + "\n"


def write_resolved_config(path, model_cfg, train_cfg, paths=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(resolved_config_text(model_cfg, train_cfg, paths))
