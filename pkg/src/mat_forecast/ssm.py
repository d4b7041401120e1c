"""Selective state-space layer: ZOH discretization, linear-recurrence scans, Mamba block.

The state recurrence ``x_k = a_k * x_{k-1} + b_k`` (elementwise over independent
lanes, ``x_0 = 0``) is exposed as one differentiable primitive,
:func:`linear_scan`, with two interchangeable execution paths:

* ``"sequential"``: a left-to-right loop, the reference.
* ``"parallel"``: a Blelloch up-sweep/down-sweep over the associative
  composition of :class:`ScanElement` pairs, vectorised across lanes.

Its backward pass is itself a (reversed) linear recurrence and is run on the
same path as the forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

SCAN_METHODS = ("sequential", "parallel")


# -- discretization --------------------------------------------------------------------


def discretize_zoh(A, B, delta):
    """Zero-order-hold discretization for a diagonal state matrix.

    Returns ``(A_bar, B_bar)`` with ``A_bar = exp(delta*A)`` and
    ``B_bar = (exp(delta*A) - 1) / A * B``; at ``A = 0`` the latter is
    ``delta * B``. Inputs broadcast elementwise.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ContractError("discretize_zoh: sampling interval must be positive")
    dA = delta * A
    return np.exp(dA), ad._exprel(dA) * delta * B


def discretize_zoh_tensor(A: Tensor, B: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable :func:`discretize_zoh` (positivity of delta is the caller's job)."""
    dA = delta * A
    return ad.exp(dA), ad.exprel(dA) * delta * B


# -- scan elements and execution paths -------------------------------------------------------


@dataclass(frozen=True)
class ScanElement:
    """Affine map x -> a*x + b. ``e1.then(e2)`` applies e1 first."""

    a: np.ndarray | float
    b: np.ndarray | float

    def then(self, other: ScanElement) -> ScanElement:
        return ScanElement(self.a * other.a, other.a * self.b + other.b)


def _scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.empty_like(b)
    state = np.zeros_like(b[0])
    for k in range(len(b)):
        state = a[k] * state + b[k]
        x[k] = state
    return x


def _scan_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = len(b)
    size = 1 << max(n - 1, 0).bit_length()
    A = np.ones((size,) + b.shape[1:])
    Bv = np.zeros((size,) + b.shape[1:])
    A[:n] = a
    Bv[:n] = b

    # up-sweep: node r accumulates (left subtree) then (right subtree)
    step = 1
    while step < size:
        r = np.arange(2 * step - 1, size, 2 * step)
        l = r - step
        Bv[r] = A[r] * Bv[l] + Bv[r]
        A[r] = A[l] * A[r]
        step *= 2

    # down-sweep: exclusive prefixes, identity at the root
    A[size - 1] = 1.0
    Bv[size - 1] = 0.0
    step = size // 2
    while step >= 1:
        r = np.arange(2 * step - 1, size, 2 * step)
        l = r - step
        tA, tB = A[l].copy(), Bv[l].copy()
        A[l], Bv[l] = A[r], Bv[r]
        A[r] = A[l] * tA
        Bv[r] = tA * Bv[l] + tB
        step //= 2

    # inclusive prefix applied to x_0 = 0 leaves only the offset term
    return a * Bv[:n] + b


def _run_scan(a: np.ndarray, b: np.ndarray, method: str) -> np.ndarray:
    if method == "sequential":
        return _scan_sequential(a, b)
    if method == "parallel":
        return _scan_parallel(a, b)
    raise ContractError(f"unknown scan method {method!r}; expected one of {SCAN_METHODS}")


def scan_recurrence(a, b, method: str = "sequential", axis: int = 0) -> np.ndarray:
    """Plain-array linear recurrence along ``axis``."""
    a = np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0)
    b = np.moveaxis(np.asarray(b, dtype=np.float64), axis, 0)
    a = np.broadcast_to(a, b.shape)
    return np.moveaxis(_run_scan(a, b, method), 0, axis)


def linear_scan(a: Tensor, b: Tensor, axis: int = 0, method: str = "parallel") -> Tensor:
    """Differentiable ``x_k = a_k x_{k-1} + b_k`` along ``axis`` with ``x_0 = 0``."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"linear_scan: shapes differ {a.shape} vs {b.shape}")
    if method not in SCAN_METHODS:
        raise ContractError(f"unknown scan method {method!r}")
    am = np.moveaxis(a.data, axis, 0)
    bm = np.moveaxis(b.data, axis, 0)
    xm = _run_scan(am, bm, method)

    def backward(g):
        gm = np.moveaxis(g, axis, 0)
        # reversed recurrence: gb_k = g_k + a_{k+1} gb_{k+1}
        a_rev = np.empty_like(am)
        a_rev[0] = 0.0
        a_rev[1:] = am[:0:-1]
        gb = _run_scan(a_rev, gm[::-1], method)[::-1]
        x_prev = np.zeros_like(xm)
        x_prev[1:] = xm[:-1]
        ga = gb * x_prev
        return np.moveaxis(ga, 0, axis), np.moveaxis(gb, 0, axis)

    return ad.make_op(np.moveaxis(xm, 0, axis), (a, b), backward, f"scan[{method}]")


# -- selective scan ------------------------------------------------------------------------------


def _selective_scan(u, delta, A, B, C, D_feed, method):
    u, delta = ad.as_tensor(u), ad.as_tensor(delta)
    A, B, C = ad.as_tensor(A), ad.as_tensor(B), ad.as_tensor(C)
    D_feed = ad.as_tensor(D_feed)
    if u.ndim < 2:
        raise DimensionError(f"selective scan: u must be (..., length, d_inner), got {u.shape}")
    length, d_inner = u.shape[-2:]
    n_state = A.shape[-1]
    if delta.shape != u.shape:
        raise DimensionError(f"selective scan: delta {delta.shape} vs u {u.shape}")
    if A.shape != (d_inner, n_state):
        raise DimensionError(f"selective scan: A {A.shape}, expected {(d_inner, n_state)}")
    for name, t in (("B", B), ("C", C)):
        if t.shape[-2:] != (length, n_state):
            raise DimensionError(
                f"selective scan: {name} {t.shape}, expected (..., {length}, {n_state})"
            )
    if D_feed.shape != (d_inner,):
        raise DimensionError(f"selective scan: D_feed {D_feed.shape}, expected ({d_inner},)")

    lead = u.shape[:-1]
    dt = ad.reshape(delta, lead + (d_inner, 1))
    Bk = ad.reshape(B, B.shape[:-1] + (1, n_state))
    A_bar, B_bar = discretize_zoh_tensor(A, Bk, dt)
    drive = B_bar * ad.reshape(u, lead + (d_inner, 1))
    if A_bar.shape != drive.shape:
        A_bar = A_bar + Tensor(np.zeros(drive.shape))
    x = linear_scan(A_bar, drive, axis=-3, method=method)
    Ck = ad.reshape(C, C.shape[:-1] + (1, n_state))
    return ad.tsum(x * Ck, axis=-1) + D_feed * u


def selective_scan_sequential(u, delta, A, B, C, D_feed) -> Tensor:
    """Selective SSM over ``u`` of shape (..., length, d_inner), reference loop.

    ``delta`` matches ``u``; ``B`` and ``C`` are (..., length, N); ``A`` is the
    (d_inner, N) diagonal state matrix; ``D_feed`` the (d_inner,) skip term.
    """
    return _selective_scan(u, delta, A, B, C, D_feed, "sequential")


def selective_scan_parallel(u, delta, A, B, C, D_feed) -> Tensor:
    """Same contract as :func:`selective_scan_sequential`, Blelloch-scan path."""
    return _selective_scan(u, delta, A, B, C, D_feed, "parallel")


def selective_scan(u, delta, A, B, C, D_feed, method: str = "parallel") -> Tensor:
    return _selective_scan(u, delta, A, B, C, D_feed, method)


# -- Mamba block ------------------------------------------------------------------------------


@dataclass
class SsmParams:
    """Weights of one Mamba-style block (matrices act on row vectors)."""

    in_proj: Tensor  # (d_model, d_inner)
    gate_proj: Tensor  # (d_model, d_inner)
    conv_w: Tensor  # (conv_width, d_inner); row -1 multiplies the current step
    conv_b: Tensor  # (d_inner,)
    dt_proj: Tensor  # (d_inner, d_inner)
    dt_bias: Tensor  # (d_inner,)
    B_proj: Tensor  # (d_inner, N)
    C_proj: Tensor  # (d_inner, N)
    A_log: Tensor  # (d_inner, N); A = -exp(A_log)
    D_feed: Tensor  # (d_inner,)
    out_proj: Tensor  # (d_inner, d_model)

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[0]

    @property
    def d_inner(self) -> int:
        return self.in_proj.shape[1]

    @property
    def n_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def conv_width(self) -> int:
        return self.conv_w.shape[0]

    def A(self) -> Tensor:
        return ad.neg(ad.exp(self.A_log))


def _uniform(rng, shape, bound):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_ssm_params(
    d_model: int,
    d_inner: int,
    n_state: int,
    rng: np.random.Generator,
    conv_width: int = 2,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
) -> SsmParams:
    """Standard Mamba initialisation: S4D-real A, softplus(dt_bias) in [dt_min, dt_max]."""
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
    dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
    A_log = np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1)))
    return SsmParams(
        in_proj=_uniform(rng, (d_model, d_inner), d_model**-0.5),
        gate_proj=_uniform(rng, (d_model, d_inner), d_model**-0.5),
        conv_w=_uniform(rng, (conv_width, d_inner), conv_width**-0.5),
        conv_b=_uniform(rng, (d_inner,), conv_width**-0.5),
        dt_proj=_uniform(rng, (d_inner, d_inner), d_inner**-0.5),
        dt_bias=Tensor(dt_bias, requires_grad=True),
        B_proj=_uniform(rng, (d_inner, n_state), d_inner**-0.5),
        C_proj=_uniform(rng, (d_inner, n_state), d_inner**-0.5),
        A_log=Tensor(A_log, requires_grad=True),
        D_feed=Tensor(np.ones(d_inner), requires_grad=True),
        out_proj=_uniform(rng, (d_inner, d_model), d_inner**-0.5),
    )


def causal_conv(v: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along axis -2, zero left padding."""
    width = weight.shape[0]
    length = v.shape[-2]
    pad_width = [(0, 0)] * v.ndim
    pad_width[-2] = (width - 1, 0)
    padded = ad.pad(v, pad_width)
    out = None
    for j in range(width):
        idx = (Ellipsis, slice(j, j + length), slice(None))
        term = padded[idx] * weight[j]
        out = term if out is None else out + term
    return out + bias


def mamba_block_forward(z: Tensor, params: SsmParams, method: str = "parallel") -> Tensor:
    """Mamba block on z of shape (..., length, d_model); shape preserving.

    in_proj -> causal conv -> SiLU -> selective SSM (input-dependent delta, B, C)
    -> times SiLU(gate_proj z) -> out_proj.
    """
    z = ad.as_tensor(z)
    if z.shape[-1] != params.d_model:
        raise DimensionError(
            f"mamba block: input width {z.shape[-1]} != d_model {params.d_model}"
        )
    v = z @ params.in_proj
    gate = ad.silu(z @ params.gate_proj)
    v = ad.silu(causal_conv(v, params.conv_w, params.conv_b))
    delta = ad.softplus(v @ params.dt_proj + params.dt_bias)
    B = v @ params.B_proj
    C = v @ params.C_proj
    y = selective_scan(v, delta, params.A(), B, C, params.D_feed, method=method)
    return (y * gate) @ params.out_proj
