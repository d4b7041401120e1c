"""Finite-difference gradient suite over every differentiable op and the toy model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import init_attention_params, multi_head_attention
from .autodiff import Tensor
from .model import MatModel, ModelConfig, mat_block_forward, revin_normalize, _init_block
from .ssm import init_ssm_params, linear_scan, mamba_block_forward, selective_scan

GRAD_TOL = 1e-4
TOY_CONFIG = dict(M=3, L=8, T=4, n1=8, n2=4, D=4, N=1, H=2)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.error:.3e} (tol {self.tol:.0e}, {self.seconds:.2f}s)"


def _weighted(fn: Callable[[Tensor], Tensor], shape_out, rng) -> Callable[[Tensor], Tensor]:
    """Turn an array-valued op into a scalar via a fixed random weighting."""
    w = Tensor(rng.standard_normal(shape_out))
    return lambda x: ad.tsum(fn(x) * w)


def _op_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    x34 = rng.standard_normal((3, 4))
    pos34 = rng.uniform(0.5, 2.0, (3, 4))
    other = Tensor(rng.standard_normal((3, 4)))
    row = Tensor(rng.standard_normal(4))
    mat45 = Tensor(rng.standard_normal((4, 5)))

    unary = {
        "exp": (ad.exp, x34),
        "expm1": (ad.expm1, x34),
        "log": (ad.log, pos34),
        "sqrt": (ad.sqrt, pos34),
        "softplus": (ad.softplus, 5 * x34),
        "silu": (ad.silu, 3 * x34),
        "sigmoid": (ad.sigmoid, 3 * x34),
        "exprel": (ad.exprel, np.concatenate([x34[:, :2], 1e-7 * x34[:, 2:]], axis=1)),
        "scale": (lambda t: ad.scale(t, -2.5), x34),
        "power": (lambda t: ad.power(t, 3), x34),
        "abs": (ad.abs_, x34 + np.sign(x34)),
        "clamp_min": (lambda t: ad.clamp_min(t, 0.0), x34 + np.sign(x34)),
        "softmax": (lambda t: ad.softmax(t, axis=-1), x34),
        "softmax_axis0": (lambda t: ad.softmax(t, axis=0), x34),
        "add_broadcast": (lambda t: t + row, x34),
        "add_broadcast_rhs": (lambda t: other + t[0], x34),
        "sub": (lambda t: other - t, x34),
        "mul_broadcast": (lambda t: t * row * t, x34),
        "div": (lambda t: other / (t * t + 1.0), x34),
        "matmul": (lambda t: t @ mat45, x34),
        "matmul_rhs": (lambda t: Tensor(x34[None]) @ ad.reshape(t, (1, 4, 3)), x34),
        "sum_axis": (lambda t: ad.tsum(t, axis=0, keepdims=True) * t, x34),
        "mean": (lambda t: ad.mean(t, axis=-1) * ad.mean(t), x34),
        "reshape_transpose": (lambda t: ad.transpose(ad.reshape(t, (2, 6)), (1, 0)), x34),
        "swapaxes": (lambda t: ad.swapaxes(ad.reshape(t, (3, 2, 2)), 0, 2), x34),
        "getitem": (lambda t: t[1:, ::2] * t[:2, 1::2], x34),
        "concat": (lambda t: ad.concat([t, t * t], axis=1), x34),
        "pad": (lambda t: ad.pad(t, [(1, 0), (0, 2)]), x34),
        "dropout": (lambda t: ad.dropout(t, 0.4, True, np.random.default_rng(3)), x34),
    }
    checks = []
    for name, (fn, x) in unary.items():
        out_shape = fn(Tensor(x)).shape
        f = _weighted(fn, out_shape, rng)
        checks.append((name, lambda f=f, x=x: ad.grad_check(f, x)))
    return checks


def _scan_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    length, d, n = 6, 3, 2
    a = rng.uniform(0.2, 0.95, (length, d, n))
    b = rng.standard_normal((length, d, n))
    u = rng.standard_normal((2, length, d))
    delta = rng.uniform(0.05, 1.0, (2, length, d))
    A = -rng.uniform(0.5, 2.0, (d, n))
    B = rng.standard_normal((2, length, n))
    C = rng.standard_normal((2, length, n))
    Dv = rng.standard_normal(d)
    checks = []
    for method in ("sequential", "parallel"):
        w = Tensor(rng.standard_normal((length, d, n)))
        checks.append(
            (
                f"linear_scan[{method}] wrt a",
                lambda m=method, w=w: ad.grad_check(lambda t: ad.tsum(linear_scan(t, b, 0, m) * w), a),
            )
        )
        checks.append(
            (
                f"linear_scan[{method}] wrt b",
                lambda m=method, w=w: ad.grad_check(lambda t: ad.tsum(linear_scan(a, t, 0, m) * w), b),
            )
        )
        wy = Tensor(rng.standard_normal((2, length, d)))
        tensors = [Tensor(v.copy(), requires_grad=True) for v in (u, delta, A, B, C, Dv)]
        checks.append(
            (
                f"selective_scan[{method}]",
                lambda m=method, ts=tensors, wy=wy: ad.grad_check_params(
                    lambda: ad.tsum(selective_scan(*ts, method=m) * wy), ts
                ),
            )
        )
    return checks


def _layer_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    checks = []
    z = Tensor(rng.standard_normal((2, 5, 4)))
    for method in ("sequential", "parallel"):
        ssm = init_ssm_params(4, 6, 2, np.random.default_rng(11))
        params = [getattr(ssm, f) for f in ssm.__dataclass_fields__]
        w = Tensor(rng.standard_normal((2, 5, 4)))
        checks.append(
            (
                f"mamba_block[{method}]",
                lambda ssm=ssm, params=params, w=w, m=method: ad.grad_check_params(
                    lambda: ad.tsum(mamba_block_forward(z, ssm, m) * w), params
                ),
            )
        )
    attn = init_attention_params(4, 2, np.random.default_rng(12))
    q = Tensor(rng.standard_normal((2, 3, 4)))
    kv = Tensor(rng.standard_normal((2, 5, 4)))
    wa = Tensor(rng.standard_normal((2, 3, 4)))
    attn_params = [attn.w_q, attn.w_k, attn.w_v, attn.w_o]
    checks.append(
        (
            "multi_head_attention",
            lambda: ad.grad_check_params(
                lambda: ad.tsum(multi_head_attention(q, kv, kv, attn) * wa), attn_params
            ),
        )
    )
    checks.append(
        (
            "self_attention wrt input",
            lambda: ad.grad_check(
                lambda t: ad.tsum(multi_head_attention(t, t, t, attn) * wa), q.data
            ),
        )
    )
    x = rng.standard_normal((2, 3, 8))
    x[0, 1] = 4.0  # constant row exercises the std guard
    wr = Tensor(rng.standard_normal((2, 3, 8)))
    checks.append(
        (
            "revin_normalize",
            lambda: ad.grad_check(lambda t: ad.tsum(revin_normalize(t, None, 1e-5)[0] * wr), x),
        )
    )
    cfg = ModelConfig(**TOY_CONFIG, seed=3)
    for mode, width in (("temporal", 8), ("channel", 8)):
        block = _init_block(mode, width, cfg, np.random.default_rng(13))
        bparams = [t for f in ("mamba", "attn") for t in _tensors(getattr(block, f))]
        bparams += [t for t in (block.lift, block.down) if t is not None]
        zb = Tensor(rng.standard_normal((2, 3, width)))
        wb = Tensor(rng.standard_normal((2, 3, width)))
        checks.append(
            (
                f"mat_block[{mode}]",
                lambda block=block, bparams=bparams, zb=zb, wb=wb: ad.grad_check_params(
                    lambda: ad.tsum(mat_block_forward(zb, block, cfg) * wb), bparams
                ),
            )
        )
    return checks


def _tensors(obj):
    return [getattr(obj, f) for f in obj.__dataclass_fields__ if isinstance(getattr(obj, f), Tensor)]


def model_gradient_error(
    cfg: ModelConfig | None = None, train_mode: bool = True, seed: int = 0
) -> float:
    """Full MAT forward + MSE at toy size, checked against central differences."""
    cfg = cfg or ModelConfig(**TOY_CONFIG, dropout=0.2, seed=seed)
    model = MatModel.create(cfg)
    rng = np.random.default_rng(seed + 100)
    x = rng.standard_normal((2, cfg.M, cfg.L))
    y = rng.standard_normal((2, cfg.M, cfg.T))

    def f():
        out = model(x, train=train_mode, rng=np.random.default_rng(7))
        d = out - y
        return ad.mean(d * d)

    return ad.grad_check_params(f, model.parameters())


def run_gradient_suite(include_model: bool = True, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = _op_checks(rng) + _scan_checks(rng) + _layer_checks(rng)
    if include_model:
        checks.append(("mat_model[toy, train mode]", lambda: model_gradient_error(seed=seed)))
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, err, GRAD_TOL, time.perf_counter() - t0))
    return results
