import os

# Pin BLAS threading before numpy loads anywhere: keeps runs single-core
# (matching how results are reported) and timing measurements stable.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from tokenprune.model import Model, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        num_layers=2,
        hidden=8,
        heads=2,
        ffn_inner=12,
        vocab_size=32,
        max_len=12,
        reduction_positions=(1,),
        num_classes=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model() -> Model:
    return Model.init(tiny_config(), seed=7)


@pytest.fixture
def tiny_span_model() -> Model:
    return Model.init(tiny_config(head_kind="span"), seed=7)


def central_difference(fn, arr: np.ndarray, index, eps: float = 1e-5) -> float:
    """Scalar central finite difference of fn() under arr[index] +- eps."""
    old = arr[index]
    arr[index] = old + eps
    up = fn()
    arr[index] = old - eps
    down = fn()
    arr[index] = old
    return (up - down) / (2.0 * eps)


def check_grad(
    fn,
    arr: np.ndarray,
    grad: np.ndarray,
    indices,
    rtol: float,
    eps: float = 1e-5,
    atol: float = 1e-9,
):
    """Assert analytic grads match central differences at the given indices.

    The absolute floor covers the difference oracle's own roundoff, which is
    about machine epsilon over the step size for order-one losses.
    """
    for index in indices:
        fd = central_difference(fn, arr, index, eps)
        g = grad[index]
        assert abs(fd - g) <= rtol * max(abs(fd), abs(g)) + atol, (
            f"grad mismatch at {index}: fd={fd:.3e} analytic={g:.3e}"
        )


def sample_indices(shape, rng: np.random.Generator, count: int = 3):
    idx = []
    for _ in range(count):
        idx.append(tuple(int(rng.integers(0, s)) for s in shape))
    return idx
