"""Clip-then-noise processing of client updates (Gaussian mechanism, no accountant)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ValidationError

# domain tag so noise streams never coincide with training streams
_NOISE_TAG = 0x4E4F495345


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ParameterError("clip_norm must be > 0")
        if not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise ParameterError("noise_std must be a finite value >= 0")


def clip_l2(delta: np.ndarray, C: float) -> np.ndarray:
    """Rescale ``delta`` onto the L2 ball of radius C. Returns ``delta`` itself when inside."""
    if not C > 0:
        raise ParameterError("clip norm must be > 0")
    if not np.all(np.isfinite(delta)):
        raise ValidationError("update contains non-finite values")
    norm = float(np.linalg.norm(delta))
    if norm <= C:
        return delta
    scale = C / norm
    out = delta * scale
    # rounding can leave the norm an ulp above C; shrink until it is inside so
    # that clipping twice is a no-op
    while np.linalg.norm(out) > C:
        scale = np.nextafter(scale, 0.0)
        out = delta * scale
    return out


def noise_rng(seed: int, client_id: int, round_: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, client_id, round_, _NOISE_TAG]))


def add_gaussian(delta: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) per coordinate (PCG64 + numpy's ziggurat normal).

    ``seed`` is anything ``default_rng`` accepts, including a Generator.
    With ``sigma == 0`` the input object is returned untouched.
    """
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    if sigma == 0:
        return delta
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return delta + sigma * rng.standard_normal(delta.shape)


def dp_process(global_params: np.ndarray, update: np.ndarray, cfg: DpConfig,
               round_: int, client_id: int) -> np.ndarray:
    """``global + noise(clip(update - global))``; the no-op configuration returns ``update`` as is."""
    if global_params.shape != update.shape:
        raise ValidationError(f"length mismatch: {global_params.shape} vs {update.shape}")
    delta = update - global_params
    clipped = clip_l2(delta, cfg.clip_norm)
    noised = add_gaussian(clipped, cfg.noise_std, noise_rng(cfg.seed, client_id, round_))
    if noised is delta:
        return update
    return global_params + noised
