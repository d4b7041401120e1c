"""The MAT forecaster: RevIN, two-stage embedding, four hybrid blocks, two-stage projection.

Data flow for an input window ``x`` of shape (..., M, L)::

    x_hat  = RevIN(x)                                  (M, L)
    x1     = EMB1(x_hat)                               (M, n1)
    f_hi   = block_t1(x1) + block_c1(x1)               (M, n1)
    x2     = dropout(EMB2(x1))                         (M, n2)
    f_lo   = block_t2(x2) + block_c2(x2)               (M, n2)
    out    = PROJ2(PROJ1(f_lo) + f_hi)                 (M, T)
    y      = RevIN^-1(out)

Temporal blocks scan along each channel's row (tokens are time points lifted
to width D); channel blocks treat the M rows as tokens of width n.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, PositionalEncoding, init_attention_params, self_attention
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .errors import ConfigError, DimensionError
from .ssm import SCAN_METHODS, SsmParams, init_ssm_params, mamba_block_forward

# candidate n1/n2 widths for full-scale runs
FULL_SCALE_WIDTHS = (512, 256, 128, 64, 32)


@dataclass
class ModelConfig:
    L: int = 96
    T: int = 96
    M: int = 21
    n1: int = 256
    n2: int = 128
    D: int = 256
    N: int = 1
    H: int = 8
    conv_width: int = 2
    dropout: float = 0.1
    revin_affine: bool = True
    revin_eps: float = 1e-5
    positional: bool = False
    block_order: str = "mamba_first"
    emb_depth: int = 1
    scan: str = "parallel"
    score_scale: str = "head"
    seed: int = 0

    def validate(self) -> ModelConfig:
        for name in ("L", "T", "M", "n1", "n2", "D", "N", "H", "conv_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.n1 <= self.n2:
            raise ConfigError(f"model.n1 ({self.n1}) must exceed model.n2 ({self.n2})")
        for name, width in (("D", self.D), ("n1", self.n1), ("n2", self.n2)):
            if width % self.H:
                raise ConfigError(f"model.H={self.H} does not divide attention width {name}={width}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must lie in [0, 1), got {self.dropout}")
        if self.block_order not in ("mamba_first", "attention_first"):
            raise ConfigError(f"model.block_order must be mamba_first or attention_first")
        if self.emb_depth not in (1, 2):
            raise ConfigError("model.emb_depth must be 1 or 2")
        if self.scan not in SCAN_METHODS:
            raise ConfigError(f"model.scan must be one of {SCAN_METHODS}")
        if self.score_scale not in ("head", "model"):
            raise ConfigError("model.score_scale must be 'head' or 'model'")
        if self.revin_eps <= 0:
            raise ConfigError("model.revin_eps must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- parameter containers ---------------------------------------------------------------


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


def init_linear(n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True) -> Linear:
    bound = n_in**-0.5
    w = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True) if bias else None
    return Linear(w, b)


@dataclass
class RevinParams:
    gamma: Tensor  # (M,)
    beta: Tensor  # (M,)


@dataclass
class RevinState:
    """Per-instance statistics, shaped (..., M, 1) for broadcasting over time."""

    mean: Tensor
    std: Tensor
    eps: float
    affine: RevinParams | None = None


@dataclass
class MatBlock:
    mamba: SsmParams
    attn: AttentionParams
    mode: str  # "temporal" or "channel"
    lift: Tensor | None = None  # (1, D), temporal only
    down: Tensor | None = None  # (D, 1), temporal only


@dataclass
class ModelParams:
    emb1: Linear
    emb2: Linear
    block_t1: MatBlock
    block_c1: MatBlock
    block_t2: MatBlock
    block_c2: MatBlock
    proj1: Linear
    proj2: Linear
    emb1_hidden: Linear | None = None
    revin: RevinParams | None = None


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk nested dataclasses yielding (dotted name, Tensor) in field order."""
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, Tensor):
            yield name, value
        elif dataclasses.is_dataclass(value):
            yield from named_tensors(value, name + ".")


def _init_block(mode: str, width: int, cfg: ModelConfig, rng: np.random.Generator) -> MatBlock:
    if mode == "temporal":
        d_model = cfg.D
        lift = Tensor(rng.uniform(-1.0, 1.0, (1, d_model)), requires_grad=True)
        down = Tensor(rng.uniform(-1.0, 1.0, (d_model, 1)) * d_model**-0.5, requires_grad=True)
    else:
        d_model = width
        lift = down = None
    return MatBlock(
        mamba=init_ssm_params(d_model, cfg.D, cfg.N, rng, conv_width=cfg.conv_width),
        attn=init_attention_params(d_model, cfg.H, rng),
        mode=mode,
        lift=lift,
        down=down,
    )


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None) -> ModelParams:
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    emb1 = init_linear(cfg.L, cfg.n1, rng)
    emb1_hidden = init_linear(cfg.n1, cfg.n1, rng) if cfg.emb_depth == 2 else None
    emb2 = init_linear(cfg.n1, cfg.n2, rng)
    revin = None
    if cfg.revin_affine:
        revin = RevinParams(
            gamma=Tensor(np.ones(cfg.M), requires_grad=True),
            beta=Tensor(np.zeros(cfg.M), requires_grad=True),
        )
    return ModelParams(
        emb1=emb1,
        emb2=emb2,
        block_t1=_init_block("temporal", cfg.n1, cfg, rng),
        block_c1=_init_block("channel", cfg.n1, cfg, rng),
        block_t2=_init_block("temporal", cfg.n2, cfg, rng),
        block_c2=_init_block("channel", cfg.n2, cfg, rng),
        proj1=init_linear(cfg.n2, cfg.n1, rng),
        proj2=init_linear(cfg.n1, cfg.T, rng),
        emb1_hidden=emb1_hidden,
        revin=revin,
    )


# -- RevIN ------------------------------------------------------------------------------------


def _guarded_std(var: Tensor, eps: float) -> Tensor:
    """max(sqrt(var), eps) without the infinite sqrt slope at var = 0."""
    s = np.sqrt(np.maximum(var.data, 0.0))
    active = s > eps
    out = np.where(active, s, eps)

    def backward(g):
        return (np.where(active, g * 0.5 / np.where(active, s, 1.0), 0.0),)

    return ad.make_op(out, (var,), backward, "guarded_std")


def revin_normalize(
    x, affine: RevinParams | None = None, eps: float = 1e-5
) -> tuple[Tensor, RevinState]:
    """Standardise each channel of x (..., M, L) over its own look-back window."""
    x = ad.as_tensor(x)
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.mean(centered * centered, axis=-1, keepdims=True)
    std = _guarded_std(var, eps)
    x_hat = centered / std
    if affine is not None:
        x_hat = x_hat * ad.reshape(affine.gamma, (-1, 1)) + ad.reshape(affine.beta, (-1, 1))
    return x_hat, RevinState(mean=mu, std=std, eps=eps, affine=affine)


def revin_denormalize(y, state: RevinState) -> Tensor:
    """Exact inverse of :func:`revin_normalize` using the look-back statistics."""
    y = ad.as_tensor(y)
    if state.affine is not None:
        y = (y - ad.reshape(state.affine.beta, (-1, 1))) / ad.reshape(state.affine.gamma, (-1, 1))
    return y * state.std + state.mean


# -- stages -----------------------------------------------------------------------------------


def embed_stage1(x_hat: Tensor, params: ModelParams) -> Tensor:
    if x_hat.shape[-1] != params.emb1.weight.shape[0]:
        raise DimensionError(
            f"EMB1: input length {x_hat.shape[-1]} != {params.emb1.weight.shape[0]}"
        )
    x1 = params.emb1(x_hat)
    if params.emb1_hidden is not None:
        x1 = params.emb1_hidden(ad.silu(x1))
    return x1


def embed_stage2(
    x1: Tensor, params: ModelParams, p: float = 0.0, train: bool = False, rng=None
) -> Tensor:
    if x1.shape[-1] != params.emb2.weight.shape[0]:
        raise DimensionError(f"EMB2: input width {x1.shape[-1]} != {params.emb2.weight.shape[0]}")
    return ad.dropout(params.emb2(x1), p, train, rng)


def _attention_sublayer(h: Tensor, block: MatBlock, cfg: ModelConfig) -> Tensor:
    a_in = h
    if cfg.positional:
        length, width = h.shape[-2:]
        a_in = h + Tensor(PositionalEncoding(width).table(length))
    return self_attention(a_in, block.attn, cfg.score_scale)


def _hybrid(z: Tensor, block: MatBlock, cfg: ModelConfig) -> Tensor:
    if cfg.block_order == "mamba_first":
        h = z + mamba_block_forward(z, block.mamba, method=cfg.scan)
        return h + _attention_sublayer(h, block, cfg)
    h = z + _attention_sublayer(z, block, cfg)
    return h + mamba_block_forward(h, block.mamba, method=cfg.scan)


def mat_block_forward(z: Tensor, block: MatBlock, cfg: ModelConfig) -> Tensor:
    """One MAT block on z of shape (..., M, n); shape preserving.

    Channel mode: h = z + Mamba(z); z' = h + Attention(h, h, h), tokens = channels.
    Temporal mode: each row is lifted to (n, D), the same hybrid runs along
    time, and the result is mapped back to width 1 and added to z.
    """
    z = ad.as_tensor(z)
    if block.mode == "channel":
        return _hybrid(z, block, cfg)
    if block.mode != "temporal":
        raise ConfigError(f"unknown block mode {block.mode!r}")
    e = ad.reshape(z, z.shape + (1,)) @ block.lift
    out = _hybrid(e, block, cfg) @ block.down
    return z + ad.reshape(out, z.shape)


def forward(
    x,
    params: ModelParams,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Map look-back windows (..., M, L) to forecasts (..., M, T)."""
    x = ad.as_tensor(x)
    if x.ndim < 2 or x.shape[-2:] != (cfg.M, cfg.L):
        raise DimensionError(f"input: expected (..., {cfg.M}, {cfg.L}), got {x.shape}")
    x_hat, state = revin_normalize(x, params.revin, cfg.revin_eps)
    x1 = embed_stage1(x_hat, params)
    fused_hi = mat_block_forward(x1, params.block_t1, cfg) + mat_block_forward(
        x1, params.block_c1, cfg
    )
    x2 = embed_stage2(x1, params, cfg.dropout, train, rng)
    fused_lo = mat_block_forward(x2, params.block_t2, cfg) + mat_block_forward(
        x2, params.block_c2, cfg
    )
    p1 = params.proj1(fused_lo)
    if p1.shape != fused_hi.shape:
        raise DimensionError(f"PROJ1: output {p1.shape} cannot fuse with {fused_hi.shape}")
    out = params.proj2(p1 + fused_hi)
    return revin_denormalize(out, state)


# -- model wrapper ----------------------------------------------------------------------------------


@dataclass
class MatModel:
    config: ModelConfig
    params: ModelParams = field(repr=False)

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator | None = None) -> MatModel:
        return cls(config, init_params(config.validate(), rng))

    def __call__(self, x, train: bool = False, rng=None) -> Tensor:
        return forward(x, self.params, self.config, train=train, rng=rng)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_tensors(self.params))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in named_tensors(self.params)]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in state:
                raise DimensionError(f"state dict is missing {name!r}")
            if state[name].shape != t.shape:
                raise DimensionError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def frozen(self) -> MatModel:
        """Copy whose weights are constants, so forward passes record no graph."""
        params = _map_tensors(self.params, lambda t: Tensor(t.data))
        return MatModel(self.config, params)

    def save(self, stem, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None):
        arrays = self.state_dict()
        arrays.update(extra or {})
        return save_arrays(stem, arrays, {"model_config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, stem) -> tuple[MatModel, dict[str, np.ndarray], dict]:
        arrays, meta = load_arrays(stem)
        cfg = ModelConfig.from_dict(meta["model_config"])
        model = cls.create(cfg)
        model.load_state_dict(arrays)
        names = {n for n, _ in model.named_parameters()}
        extra = {k: v for k, v in arrays.items() if k not in names}
        return model, extra, meta


def _map_tensors(obj, fn):
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, Tensor):
            changes[f.name] = fn(value)
        elif dataclasses.is_dataclass(value):
            changes[f.name] = _map_tensors(value, fn)
    return dataclasses.replace(obj, **changes)
