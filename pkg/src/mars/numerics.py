"""Dense float64 primitives shared by the trainable models.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Everything
here is a pure function; optimizer state is passed in and returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


class BandwidthError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; masked entries get 0.

    Every row must have at least one unmasked entry.
    """
    s = np.where(mask, scores, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(v: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ShapeError("layer_norm of an empty vector")
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps)


def layer_norm_backward(y: np.ndarray, dy: np.ndarray, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    # y is the forward output for input x
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))


def cosine_rows(m: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Cosine of every row of ``m`` against ``q``; zero-norm rows or query give 0."""
    m = as_matrix(m)
    q = np.asarray(q, dtype=np.float64)
    if m.shape[1] != q.shape[0]:
        raise ShapeError(f"dimension mismatch: {m.shape[1]} vs {q.shape[0]}")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    qn = math.sqrt(float(q @ q))
    out = np.zeros(m.shape[0])
    ok = norms > 0
    if qn == 0.0:
        return out
    out[ok] = (m[ok] @ q) / (norms[ok] * qn)
    return np.clip(out, -1.0, 1.0)


def rbf_kernel(a, b, gamma: float) -> float:
    if not gamma > 0:
        raise BandwidthError(f"bandwidth must be positive, got {gamma}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return math.exp(-float(d @ d) / (2.0 * gamma * gamma))


def sq_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact pairwise squared distances by explicit differences (no expansion trick)."""
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def rbf_gram(x: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise BandwidthError(f"bandwidth must be positive, got {gamma}")
    return np.exp(-sq_distances(x, y) / (2.0 * gamma * gamma))


def median_bandwidth(img: np.ndarray, txt: np.ndarray, floor: float = 1e-8) -> float:
    """Median Euclidean distance over the full image x text cross product.

    Falls back to 1.0 when the median is below ``floor``.
    """
    img = as_matrix(img)
    txt = as_matrix(txt)
    if img.shape[0] == 0 or txt.shape[0] == 0:
        raise EmptyBatchError("median bandwidth needs at least one row per modality")
    if img.shape[1] != txt.shape[1]:
        raise ShapeError(f"column mismatch: {img.shape[1]} vs {txt.shape[1]}")
    med = float(np.median(np.sqrt(sq_distances(img, txt))))
    return med if med >= floor else 1.0


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, dk: int) -> np.ndarray:
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    if q.shape[1] != dk or k.shape[1] != dk:
        raise ShapeError(f"query/key width must equal dk={dk}: {q.shape}, {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"keys and values disagree on length: {k.shape[0]} vs {v.shape[0]}")
    if k.shape[0] == 0:
        raise ShapeError("attention over an empty key set")
    weights = softmax_rows(q @ k.T / math.sqrt(dk))
    return weights @ v


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adamw_step(params: Params, grads: Mapping[str, np.ndarray], state: OptimizerState,
               no_decay: frozenset[str] = frozenset()) -> tuple[Params, OptimizerState]:
    """One AdamW update with decoupled weight decay and bias correction.

    Returns fresh parameter/state objects; the inputs are left untouched.
    Parameters named in ``no_decay`` skip the decay term.
    """
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for {name!r}")
        if grads[name].shape != p.shape:
            raise ShapeError(f"gradient shape {grads[name].shape} != param shape {p.shape} for {name!r}")
        if name not in state.m:
            raise ShapeError(f"optimizer state has no moments for {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        decay = 0.0 if name in no_decay else state.weight_decay
        p_new = p * (1.0 - state.lr * decay) if decay else p.copy()
        p_new -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = p_new
        new_m[name] = m
        new_v[name] = v
    new_state = OptimizerState(lr=state.lr, beta1=b1, beta2=b2, eps=state.eps,
                               weight_decay=state.weight_decay, step=t, m=new_m, v=new_v)
    return new_params, new_state


def finite_diff_check(loss_fn: Callable[[Params], float], params: Mapping[str, np.ndarray],
                      analytic: Mapping[str, np.ndarray], h: float = 1e-6) -> float:
    """Max coordinate-wise relative error between ``analytic`` and central differences.

    The relative error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    worst = 0.0
    for name, p in work.items():
        a_grad = np.asarray(analytic[name], dtype=np.float64)
        if a_grad.shape != p.shape:
            raise ShapeError(f"analytic gradient shape mismatch for {name!r}")
        flat = p.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(work)
            flat[i] = orig - h
            down = loss_fn(work)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            num = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - num) / max(1e-8, abs(a_flat[i]) + abs(num))
            worst = max(worst, err)
    return worst
