"""
Parametric corruptions used as the augmentation T in DA / AugMix / AugMax
training and as the severity sweep in corruption evaluation.

Severity 0 is the identity; 1..5 index the tables below. Spatial kinds act on
the last two axes and accept (H, W), (C, H, W) or (N, C, H, W) arrays.
"""

import logging
from typing import Union

import numpy as np
from pydantic import ValidationError

from drlkit.core.tensor import Tensor
from drlkit.models.schemas import TransformKind, TransformSpec
from drlkit.utils.errors import ConfigError, ShapeError
from drlkit.utils.seeding import substream

logger = logging.getLogger(__name__)

NOISE_SIGMA = (0.04, 0.06, 0.08, 0.09, 0.10)
BLUR_SIGMA = (0.4, 0.6, 0.7, 0.8, 1.0)
CONTRAST_FACTOR = (0.75, 0.5, 0.4, 0.3, 0.15)
OCCLUSION_FRACTION = (0.1, 0.2, 0.3, 0.4, 0.5)

CHAINABLE = (
    TransformKind.GAUSSIAN_NOISE,
    TransformKind.BLUR,
    TransformKind.CONTRAST,
    TransformKind.OCCLUSION,
)


def _as_spec(spec) -> TransformSpec:
    if isinstance(spec, TransformSpec):
        return spec
    try:
        return TransformSpec.model_validate(spec)
    except ValidationError as exc:
        raise ConfigError(f"invalid transform: {exc}") from exc


def _canonical(x: np.ndarray) -> np.ndarray:
    """View as (N, C, H, W)."""
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ShapeError(f"spatial transforms need 2 to 4 axes, got shape {x.shape}")


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3 * sigma)))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def _blur_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(x, pad, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=axis)
    return windows @ kernel


def gaussian_noise(x: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    return x + rng.normal(0.0, NOISE_SIGMA[severity - 1], size=x.shape)


def blur(x: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    kernel = _gaussian_kernel(BLUR_SIGMA[severity - 1])
    out = _canonical(x)
    out = _blur_axis(_blur_axis(out, kernel, axis=2), kernel, axis=3)
    return out.reshape(x.shape)


def contrast(x: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    factor = CONTRAST_FACTOR[severity - 1]
    view = _canonical(x)
    means = view.mean(axis=(2, 3), keepdims=True)
    return ((view - means) * factor + means).reshape(x.shape)


def occlusion(x: np.ndarray, severity: int, rng: np.random.Generator, fill: float = 0.0) -> np.ndarray:
    """Square patch of side fraction*min(H, W) at a seeded position per image."""
    out = _canonical(x).copy()
    n, _, h, w = out.shape
    side = max(1, int(round(OCCLUSION_FRACTION[severity - 1] * min(h, w))))
    rows = rng.integers(0, h - side + 1, size=n)
    cols = rng.integers(0, w - side + 1, size=n)
    for i in range(n):
        out[i, :, rows[i]:rows[i] + side, cols[i]:cols[i] + side] = fill
    return out.reshape(x.shape)


_BASE = {
    TransformKind.GAUSSIAN_NOISE: gaussian_noise,
    TransformKind.BLUR: blur,
    TransformKind.CONTRAST: contrast,
    TransformKind.OCCLUSION: occlusion,
}


def corrupt_transform(x: Union[np.ndarray, Tensor], spec) -> Union[np.ndarray, Tensor]:
    """Apply ``spec`` to ``x`` and clamp into the valid range.

    The same (x, spec) always yields the same output: randomness comes only
    from the ``transform`` stream of ``spec.seed``. Gaussian noise draws
    ``rng.normal(0, sigma, x.shape)`` as its first and only sample.
    """
    spec = _as_spec(spec)
    is_tensor = isinstance(x, Tensor)
    values = x.data if is_tensor else np.asarray(x)
    out_dtype = values.dtype if np.issubdtype(values.dtype, np.floating) else np.float64
    if spec.severity == 0 or spec.kind == TransformKind.IDENTITY:
        out = values.astype(out_dtype, copy=True)
        return Tensor(out, dtype=out_dtype) if is_tensor else out

    rng = substream(spec.seed, "transform")
    work = values.astype(np.float64)
    if spec.kind == TransformKind.CHAIN:
        picks = rng.integers(0, len(CHAINABLE), size=spec.chain_length)
        for idx in picks:
            work = _BASE[CHAINABLE[idx]](work, spec.severity, rng)
    else:
        work = _BASE[spec.kind](work, spec.severity, rng)

    lo, hi = spec.valid_range
    out = np.clip(work, lo, hi).astype(out_dtype)
    return Tensor(out, dtype=out_dtype) if is_tensor else out


def sample_candidates(base: TransformSpec, count: int, seed: int) -> list[TransformSpec]:
    """``count`` specs of the same kind and severity with independent seeds."""
    rng = substream(seed, "transform")
    seeds = rng.integers(0, 2**31 - 1, size=count)
    return [base.model_copy(update={"seed": int(s)}) for s in seeds]
