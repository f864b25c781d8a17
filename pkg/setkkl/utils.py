import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, Union

import numpy as np

PathLike = Union[str, Path]

# Central-difference steps by nesting depth (innermost first)
FD_STEPS = (1e-6, 1e-4, 1e-3)


def time_grid(t0: float, t1: float, step: float) -> np.ndarray:
    """
    Build a fixed-step grid from t0 to t1 whose last node is exactly t1

    The last step is shortened when the span is not a multiple of step.
    Works for t1 < t0 (decreasing grid).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    span = abs(t1 - t0)
    if span == 0:
        return np.array([float(t0)])
    ratio = span / step
    nearest = round(ratio)
    if nearest > 0 and abs(ratio - nearest) < 1e-9 * max(1.0, ratio):
        n_steps = int(nearest)
    else:
        n_steps = int(math.ceil(ratio))
    sign = 1.0 if t1 > t0 else -1.0
    times = t0 + sign * step * np.arange(n_steps + 1, dtype=float)
    times[-1] = t1
    return times


def as_batch(x: Any) -> tuple[np.ndarray, bool]:
    """Return x as a 2-D float array and whether the input was a single vector."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1), True
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def central_difference(
    fun: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    rel_step: float = FD_STEPS[0],
) -> np.ndarray:
    """
    Jacobian of a vectorized map by central differences

    Args:
        fun: map from (..., n) arrays to (..., m) arrays
        x: evaluation points, shape (..., n)
        rel_step: step is rel_step * max(1, |x|) per point

    Returns:
        Array of shape (..., m, n)
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    scale = np.maximum(1.0, np.linalg.norm(x, axis=-1, keepdims=True))
    delta = rel_step * scale
    columns = []
    for j in range(n):
        offset = np.zeros_like(x)
        offset[..., j] = delta[..., 0]
        diff = (np.asarray(fun(x + offset)) - np.asarray(fun(x - offset))) / (2.0 * delta)
        columns.append(diff)
    return np.stack(columns, axis=-1)


def singular_values(jac: np.ndarray) -> np.ndarray:
    """Batched singular values, descending, shape (..., min(m, n))."""
    return np.linalg.svd(np.asarray(jac, dtype=float), compute_uv=False)


def condition_numbers(sv: np.ndarray) -> np.ndarray:
    """Ratio of extreme singular values; inf where the smallest is zero."""
    smax = sv[..., 0]
    smin = sv[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(smin > 0, smax / np.where(smin > 0, smin, 1.0), np.inf)
    return cond


def format_value(value: Any) -> str:
    """Format a value for CSV/JSON output; floats get 17 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _atomic_write(path: PathLike, text: str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write an RFC-4180 CSV with LF line endings, atomically."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return _atomic_write(path, buffer.getvalue())


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            return str(v)
        return float(format(v, ".17g"))
    if isinstance(value, complex):
        return [value.real, value.imag]
    return value


def write_json(path: PathLike, payload: Any) -> Path:
    """Write a JSON document with sorted keys, atomically."""
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"
    return _atomic_write(path, text)


def directional_difference(
    fun: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    direction: np.ndarray,
    rel_step: float = FD_STEPS[0],
) -> np.ndarray:
    """
    Derivative of a vectorized map along per-point directions by one central difference

    Args:
        fun: map from (..., n) arrays to arrays of shape (..., *out)
        x: evaluation points, shape (..., n)
        direction: one direction per point, shape (..., n)
        rel_step: displacement is at most rel_step * max(1, |x|) per point

    Returns:
        Array of shape (..., *out)
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(direction, dtype=float)
    scale = np.maximum(1.0, np.linalg.norm(x, axis=-1))
    t = rel_step * scale / np.maximum(1.0, np.linalg.norm(v, axis=-1))
    plus = np.asarray(fun(x + t[..., None] * v))
    minus = np.asarray(fun(x - t[..., None] * v))
    t = t.reshape(t.shape + (1,) * (plus.ndim - t.ndim))
    return (plus - minus) / (2.0 * t)
