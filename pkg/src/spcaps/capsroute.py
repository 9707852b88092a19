"""One capsule layer from superpixel capsules to class capsules.

Shapes (batch axis ``N`` leading everywhere):

    u      (N, S, k0)        superpixel features
    W      (S, J, k1, k0)    per (superpixel, class) transforms
    u_hat  (N, S, J, k1)     predictions W_ij u_i
    b, c   (N, S, J)         routing logits / coupling coefficients
    s, v   (N, J, k1)        pre-squash sums / class capsules

Routing is unrolled and every iterate is kept, so :func:`routing_backward`
differentiates through all iterations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


@dataclass
class CapsuleState:
    u: np.ndarray
    u_hat: np.ndarray
    mask: np.ndarray
    b: np.ndarray
    c: np.ndarray
    s: np.ndarray
    v: np.ndarray
    # per-iteration history for the backward pass
    cs: list = field(default_factory=list)
    ss: list = field(default_factory=list)
    vs: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.cs)


def _batched(x: np.ndarray, ndim: int) -> np.ndarray:
    x = np.asarray(x)
    return x[None] if x.ndim == ndim - 1 else x


def init_weights(S: int, J: int, k0: int, k1: int, rng: np.random.Generator, scale: float | None = None, dtype=np.float32) -> np.ndarray:
    """Gaussian init, std ``scale`` (default ``1/sqrt(k0)``)."""
    std = 1.0 / np.sqrt(k0) if scale is None else scale
    return (rng.standard_normal((S, J, k1, k0)) * std).astype(dtype)


def param_count(S: int, J: int, k0: int, k1: int) -> int:
    return S * J * k0 * k1


def predict_vectors(u: np.ndarray, W: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    u = _batched(u, 3)
    S, J, k1, k0 = W.shape
    if u.shape[1:] != (S, k0):
        raise ValueError(f"u has shape {u.shape[1:]}, weights expect {(S, k0)}")
    u_hat = np.einsum("sjab,nsb->nsja", W, u, optimize=True)
    if mask is not None:
        u_hat = u_hat * _batched(mask, 2)[:, :, None, None]
    return u_hat


def squash(s: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale ``s`` to length ``|s|^2 / (1 + |s|^2)`` keeping its direction."""
    sq = np.sum(s * s, axis=axis, keepdims=True)
    norm = np.sqrt(sq)
    return s * (norm / (1.0 + sq))


def squash_backward(s: np.ndarray, grad_v: np.ndarray) -> np.ndarray:
    sq = np.sum(s * s, axis=-1, keepdims=True)
    n = np.sqrt(sq)
    g = n / (1.0 + sq)
    # d g / d n, divided by n; v = g(n) s
    dg_over_n = np.divide((1.0 - sq) / (1.0 + sq) ** 2, n, out=np.zeros_like(n), where=n > _EPS)
    return g * grad_v + dg_over_n * s * np.sum(s * grad_v, axis=-1, keepdims=True)


def _masked_softmax(b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = b - b.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True) * mask[:, :, None]


def dynamic_routing(u_hat: np.ndarray, mask: np.ndarray | None = None, iterations: int = 3) -> CapsuleState:
    """Routing-by-agreement from S child capsules to J parents."""
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    u_hat = _batched(u_hat, 4)
    n, S, J, _ = u_hat.shape
    mask = np.ones((n, S), dtype=bool) if mask is None else np.broadcast_to(_batched(mask, 2), (n, S))
    m = mask.astype(u_hat.dtype)
    b = np.zeros((n, S, J), dtype=u_hat.dtype)
    st = CapsuleState(u=None, u_hat=u_hat, mask=mask, b=b, c=None, s=None, v=None)
    for it in range(iterations):
        c = _masked_softmax(b, m)
        s = np.einsum("nsj,nsja->nja", c, u_hat, optimize=True)
        v = squash(s)
        st.cs.append(c)
        st.ss.append(s)
        st.vs.append(v)
        if it < iterations - 1:
            b = b + np.einsum("nsja,nja->nsj", u_hat, v, optimize=True)
    st.b, st.c, st.s, st.v = b, c, s, v
    return st


def class_probability(v: np.ndarray) -> np.ndarray:
    """Capsule lengths; the predicted class is ``argmax`` (first index on ties)."""
    return np.linalg.norm(v, axis=-1)


def predict(v: np.ndarray) -> np.ndarray:
    return np.argmax(class_probability(v), axis=-1)


def margin_loss(v: np.ndarray, target, m_plus: float = 0.9, m_minus: float = 0.1, lam: float = 0.5):
    """Per-sample margin loss and its gradient with respect to ``v``.

    ``v`` is ``(J, k1)`` or ``(N, J, k1)``; ``target`` an int or ``(N,)``.
    Returns ``(loss, grad_v)`` with loss shaped like the batch.
    """
    single = np.asarray(v).ndim == 2
    v = _batched(v, 3)
    target = np.atleast_1d(np.asarray(target))
    n, J, _ = v.shape
    if np.any(target < 0) or np.any(target >= J):
        raise ValueError(f"target outside [0, {J})")
    T = np.zeros((n, J), dtype=v.dtype)
    T[np.arange(n), target] = 1.0
    norm = np.linalg.norm(v, axis=-1)
    pos = np.maximum(0.0, m_plus - norm)
    neg = np.maximum(0.0, norm - m_minus)
    loss = np.sum(T * pos**2 + lam * (1 - T) * neg**2, axis=-1)
    dnorm = -2.0 * T * pos + 2.0 * lam * (1 - T) * neg
    unit = np.divide(v, norm[..., None], out=np.zeros_like(v), where=norm[..., None] > _EPS)
    grad = dnorm[..., None] * unit
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def routing_backward(state: CapsuleState, grad_v: np.ndarray, W: np.ndarray | None = None):
    """Gradient through the unrolled routing.

    Returns ``grad_u_hat`` and, when ``W`` and ``state.u`` are available,
    also ``(grad_u, grad_W)`` as a 3-tuple ``(grad_u_hat, grad_u, grad_W)``.
    """
    u_hat = state.u_hat
    grad_v = _batched(grad_v, 3)
    if grad_v.shape != state.v.shape:
        raise ValueError(f"grad_v shape {grad_v.shape} does not match v {state.v.shape}")
    r = state.iterations
    g_uhat = np.zeros_like(u_hat)
    g_b = np.zeros_like(state.cs[0])
    g_v = grad_v
    for t in range(r - 1, -1, -1):
        c, s, v = state.cs[t], state.ss[t], state.vs[t]
        if t < r - 1:
            # b_{t+1} = b_t + <u_hat, v_t>
            g_v = np.einsum("nsj,nsja->nja", g_b, u_hat, optimize=True)
            g_uhat += g_b[..., None] * v[:, None, :, :]
        g_s = squash_backward(s, g_v)
        g_uhat += c[..., None] * g_s[:, None, :, :]
        g_c = np.einsum("nja,nsja->nsj", g_s, u_hat, optimize=True)
        # softmax over j; masked rows have c = 0 and receive nothing
        g_b = g_b + c * (g_c - np.sum(c * g_c, axis=-1, keepdims=True))
    if W is None or state.u is None:
        return g_uhat
    g_uhat = g_uhat * state.mask[:, :, None, None]
    g_u = np.einsum("sjab,nsja->nsb", W, g_uhat, optimize=True)
    g_W = np.einsum("nsja,nsb->sjab", g_uhat, state.u, optimize=True)
    return g_uhat, g_u, g_W


def capsule_forward(u: np.ndarray, W: np.ndarray, mask: np.ndarray | None = None, iterations: int = 3) -> CapsuleState:
    """Predictions plus routing, keeping ``u`` for the weight gradient."""
    u = _batched(u, 3)
    if mask is None:
        mask = np.ones(u.shape[:2], dtype=bool)
    mask = np.broadcast_to(_batched(mask, 2), u.shape[:2])
    state = dynamic_routing(predict_vectors(u, W, mask), mask, iterations)
    state.u = u
    return state
