import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from kidney.utils.logger import configure_logger
from kidney.utils.tensor_utils import (
    RunningStats,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    conv2d_transpose,
    crop_spatial,
    dropout,
    l2_penalty,
    recording,
    relu,
    softmax_channels,
    weighted_cross_entropy,
)


logger = logging.getLogger(__name__)
configure_logger(logger)


FD_STEP = 1e-5
TOLERANCE = 1e-4
MAX_CHECKED_ENTRIES = 48


@dataclass
class GradcheckResult:
    op: str
    max_relative_error: float
    cases: int
    passed: bool


@dataclass
class GradcheckCase:
    """One randomized instance: float64 inputs plus the op applied to them."""
    inputs: list[Tensor]
    apply: Callable[..., Tensor]


def _tensor(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape).astype(np.float64), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Tensor:
    values = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(values.astype(np.float64), requires_grad=True)


def _nchw(rng: np.random.Generator, low: int = 3) -> tuple[int, int, int, int]:
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
            int(rng.integers(low, 8)), int(rng.integers(low, 8)))


##################################################
# Case builders
##################################################


def _conv2d_case(rng):
    n, c, h, w = _nchw(rng)
    f = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    return GradcheckCase(
        [_tensor(rng, n, c, h, w), _tensor(rng, f, c, k, k, scale=0.5), _tensor(rng, f)],
        lambda x, kernel, bias: conv2d(x, kernel, bias, stride=stride),
    )


def _conv2d_transpose_case(rng):
    n, c, h, w = _nchw(rng, low=2)
    f = int(rng.integers(1, 4))
    k = int(rng.choice([1, 2, 3]))
    return GradcheckCase(
        [_tensor(rng, n, c, h, w), _tensor(rng, f, c, k, k, scale=0.5), _tensor(rng, f)],
        lambda x, kernel, bias: conv2d_transpose(x, kernel, bias),
    )


def _batch_norm_case(rng, mode: str):
    n, c, h, w = _nchw(rng)
    n = max(n, 2)
    running = RunningStats(rng.normal(size=c), rng.uniform(0.5, 2.0, size=c))

    def apply(x, gamma, beta):
        return batch_norm(x, gamma, beta, RunningStats(running.mean.copy(), running.var.copy()), mode=mode)

    return GradcheckCase(
        [_tensor(rng, n, c, h, w), _tensor(rng, c), _tensor(rng, c)],
        apply,
    )


def _relu_case(rng):
    return GradcheckCase([_away_from_zero(rng, *_nchw(rng))], relu)


def _dropout_case(rng):
    seed = int(rng.integers(0, 2**31))
    return GradcheckCase(
        [_tensor(rng, *_nchw(rng))],
        lambda x: dropout(x, 0.5, mode="train", seed=seed, layer_id=1, step=3),
    )


def _softmax_case(rng):
    return GradcheckCase([_tensor(rng, *_nchw(rng))], softmax_channels)


def _cross_entropy_case(rng):
    n, _, h, w = _nchw(rng)
    target = rng.integers(0, 3, size=(n, h, w))
    weights = rng.uniform(0.1, 3.0, size=3).tolist()
    return GradcheckCase(
        [_tensor(rng, n, 3, h, w)],
        lambda logits: weighted_cross_entropy(softmax_channels(logits), target, weights),
    )


def _l2_case(rng):
    count = int(rng.integers(1, 4))
    kernels = [_tensor(rng, *(int(d) for d in rng.integers(1, 4, size=4))) for _ in range(count)]
    return GradcheckCase(kernels, lambda *ks: l2_penalty(ks, scale=0.1))


def _add_case(rng):
    shape = _nchw(rng)
    return GradcheckCase([_tensor(rng, *shape), _tensor(rng, *shape)], add)


def _concat_case(rng):
    n, c, h, w = _nchw(rng)
    return GradcheckCase(
        [_tensor(rng, n, c, h, w), _tensor(rng, n, int(rng.integers(1, 4)), h, w)],
        concat_channels,
    )


def _crop_case(rng):
    n, c, h, w = _nchw(rng)
    height, width = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
    return GradcheckCase([_tensor(rng, n, c, h, w)], lambda x: crop_spatial(x, height, width))


CASE_BUILDERS: dict[str, Callable[[np.random.Generator], GradcheckCase]] = {
    "conv2d": _conv2d_case,
    "conv2d_transpose": _conv2d_transpose_case,
    "batch_norm": lambda rng: _batch_norm_case(rng, "train"),
    "batch_norm_eval": lambda rng: _batch_norm_case(rng, "eval"),
    "relu": _relu_case,
    "dropout": _dropout_case,
    "softmax_channels": _softmax_case,
    "weighted_cross_entropy": _cross_entropy_case,
    "l2_penalty": _l2_case,
    "add": _add_case,
    "concat_channels": _concat_case,
    "crop_spatial": _crop_case,
}


##################################################
# Checker
##################################################


def check_case(case: GradcheckCase, rng: np.random.Generator, step: float = FD_STEP) -> float:
    """Compares tape gradients against central finite differences.

    The objective is sum(output * R) for a fixed random R, so every output
    element contributes. Large inputs are checked at a random subset of entries.

    Returns:
        float: ||analytic - numeric|| / (||analytic|| + ||numeric||) over the checked entries.
    """
    with recording() as tape:
        out = case.apply(*case.inputs)
    weights = rng.normal(size=out.shape)
    tape.backward(out, seed_grad=weights)

    analytic, numeric = [], []
    for tensor in case.inputs:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        checked = np.arange(flat.size)
        if flat.size > MAX_CHECKED_ENTRIES:
            checked = rng.choice(flat.size, size=MAX_CHECKED_ENTRIES, replace=False)
        for index in checked:
            original = flat[index]
            flat[index] = original + step
            plus = float(np.sum(case.apply(*case.inputs).data * weights))
            flat[index] = original - step
            minus = float(np.sum(case.apply(*case.inputs).data * weights))
            flat[index] = original
            numeric.append((plus - minus) / (2.0 * step))
            analytic.append(grad.reshape(-1)[index])

    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denominator = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denominator)


def gradcheck(op: str, cases: int = 5, seed: int = 0, tolerance: float = TOLERANCE) -> GradcheckResult:
    """Runs the finite-difference check for one op over several random shapes.

    Raises:
        ValueError: If the op name is unknown.
    """
    if op not in CASE_BUILDERS:
        raise ValueError(f"Unknown op '{op}'. Available: {', '.join(CASE_BUILDERS)}")
    rng = np.random.default_rng([seed, list(CASE_BUILDERS).index(op)])
    worst = 0.0
    for _ in range(cases):
        worst = max(worst, check_case(CASE_BUILDERS[op](rng), rng))
    passed = worst < tolerance
    log = logger.info if passed else logger.error
    log(f"gradcheck {op}: max relative error {worst:.3e} over {cases} cases")
    return GradcheckResult(op, worst, cases, passed)


def run_gradcheck_suite(ops: list[str] | None = None, cases: int = 5, seed: int = 0,
                        tolerance: float = TOLERANCE) -> list[GradcheckResult]:
    return [gradcheck(op, cases, seed, tolerance) for op in (ops or list(CASE_BUILDERS))]
