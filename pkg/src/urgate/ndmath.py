"""Dense numerics shared by every other module.

Arrays are plain ``numpy.ndarray`` values. Elementwise functions accept any
shape; vector functions (softmax, cumax) operate along the last axis so the
same code serves a single hidden vector and a ``(batch, hidden)`` block.

Random numbers come from numpy's ``PCG64`` bit generator seeded through a
``SeedSequence(seed, spawn_key=(stream,))``. numpy guarantees the PCG64 stream
for a given seed sequence is stable across platforms and releases, which is
what the seeded acceptance tests rely on.
"""

import logging
from collections.abc import Iterable, Mapping
from typing import TypeVar

import numpy as np
from scipy import special

from .errors import ShapeError

logger = logging.getLogger("urgate.ndmath")

DEFAULT_DTYPE = np.float64

# Named random streams. Every consumer draws from its own stream so the data a
# run sees does not depend on how many parameters the gate variant samples.
STREAM_INIT = 0
STREAM_DATA = 1
STREAM_EVAL = 2
STREAM_PROBE = 3

Rng = np.random.Generator
T = TypeVar("T")


# --- Nonlinearities ---


def sigmoid(x):
    """Logistic function 1/(1+exp(-x)), elementwise and overflow-free."""
    return special.expit(x)


def inverse_sigmoid(p, eps: float):
    """Clamp ``p`` into [eps, 1-eps] and return its log-odds."""
    if not 0.0 < eps <= 0.5:
        raise ValueError(f"eps must lie in (0, 0.5], got {eps}")
    return special.logit(np.clip(p, eps, 1.0 - eps))


def tanh_act(x):
    return np.tanh(x)


def softmax(v: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, with the row maximum subtracted first."""
    v = np.asarray(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ShapeError("empty vector")
    return special.softmax(v, axis=-1)


def softmax_backward(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``s``."""
    return s * (ds - np.sum(ds * s, axis=-1, keepdims=True))


def cumax(v: np.ndarray, return_softmax: bool = False):
    """Cumulative sum of the softmax along the last axis.

    The running sum is sequential left to right, so the result is bit-stable.
    With ``return_softmax`` the intermediate softmax is returned as well; the
    backward pass needs it.
    """
    s = softmax(v)
    y = np.cumsum(s, axis=-1)
    if return_softmax:
        return y, s
    return y


def cumax_backward(s: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of cumax given the cached softmax ``s``."""
    # d/ds_k of sum_j dy_j * y_j is the reverse cumulative sum of dy from k.
    ds = np.flip(np.cumsum(np.flip(dy, axis=-1), axis=-1), axis=-1)
    return softmax_backward(s, ds)


# --- Linear maps ---


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Return ``W x + b`` for a vector ``x`` or for each row of a batch ``x``."""
    W = np.asarray(W)
    x = np.asarray(x)
    if W.ndim != 2:
        raise ShapeError(f"weight must be a matrix, got shape {W.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"affine: expected input of size {W.shape[1]}, got {x.shape[-1]} "
            f"(weight {W.shape[0]}x{W.shape[1]})"
        )
    out = x @ W.T
    if b is not None:
        b = np.asarray(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(
                f"affine: expected bias of shape ({W.shape[0]},), got {b.shape}"
            )
        out = out + b
    return out


# --- Random generation ---


def make_rng(seed: int, stream: int = 0) -> Rng:
    """Generator for ``(seed, stream)``; distinct streams are independent."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(seq))


def rng_uniform(rng: Rng, lo: float, hi: float, n: int) -> np.ndarray:
    """``n`` i.i.d. draws from [lo, hi)."""
    if not lo < hi:
        raise ValueError(f"rng_uniform needs lo < hi, got [{lo}, {hi})")
    return rng.uniform(lo, hi, size=n)


# --- Norms ---


def _values(vs) -> list[np.ndarray]:
    if isinstance(vs, Mapping):
        return [np.asarray(v) for v in vs.values()]
    return [np.asarray(v) for v in vs]


def global_norm(vs: Iterable[np.ndarray] | Mapping[str, np.ndarray]) -> float:
    """Euclidean norm of all entries of all arrays taken together."""
    return float(np.sqrt(sum(float(np.sum(np.square(v))) for v in _values(vs))))


def clip_by_global_norm(vs: T, max_norm: float) -> tuple[T, float]:
    """Scale every array by ``max_norm / norm`` when the global norm exceeds it.

    Accepts a mapping (returns a dict with the same keys) or a sequence
    (returns a list). The second return value is the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(vs)
    scale = 1.0 if norm <= max_norm else max_norm / norm
    if isinstance(vs, Mapping):
        return {k: np.asarray(v) * scale for k, v in vs.items()}, norm
    return [np.asarray(v) * scale for v in vs], norm


def all_finite(*arrays) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)
