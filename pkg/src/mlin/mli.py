"""One multi-modality latent interaction (MLI) block.

The block compresses regions and words into ``k`` softmax-pooled summaries
each, fuses all ``k*k`` summary pairs, lets the pairs exchange information,
and finally lets every original region/word pull from the fused pairs with
multi-head key-query attention plus a residual add.  Input and output shapes
match, so blocks stack.

All functions accept an optional leading batch axis on the feature tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

INTERACTION_OPS = ("product", "addition", "concat")


class ConfigError(ValueError):
    """Invalid or inconsistent architecture/run configuration."""


@dataclass
class MliConfig:
    d_model: int = 512
    k: int = 6
    heads: int = 12
    head_dim: int = 128
    interaction_op: str = "product"
    dropout_rate: float = 0.1
    stacks: int = 1
    # False: single head, values are the fused pairs themselves (no value/output projection)
    value_proj: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model < 1 or self.k < 1 or self.heads < 1 or self.head_dim < 1 or self.stacks < 1:
            raise ConfigError(f"all sizes must be positive: {self}")
        if self.interaction_op not in INTERACTION_OPS:
            raise ConfigError(f"unknown interaction operator {self.interaction_op!r}; expected one of {INTERACTION_OPS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.value_proj and self.heads != 1:
            raise ConfigError("value_proj=False aggregates the fused pairs directly and needs heads=1")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class MliLayerParams:
    """Learnable tensors of one MLI block.

    Weights are stored input-major, ``(in, out)``, except the summary weights
    ``W_R``/``W_E`` (k, d) and the pair-mixing ``W_p`` (k^2, k^2), which act
    from the left.
    """

    W_R: Tensor
    b_R: Tensor
    W_E: Tensor
    b_E: Tensor
    W_A: Tensor
    b_A: Tensor
    W_c: Tensor
    b_c: Tensor
    W_p: Tensor
    b_p: Tensor
    W_qr: Tensor
    b_qr: Tensor
    W_qe: Tensor
    b_qe: Tensor
    W_k: Tensor
    b_k: Tensor
    W_v: Optional[Tensor] = None
    b_v: Optional[Tensor] = None
    W_or: Optional[Tensor] = None
    b_or: Optional[Tensor] = None
    W_oe: Optional[Tensor] = None
    b_oe: Optional[Tensor] = None

    @classmethod
    def init(cls, cfg: MliConfig, rng: np.random.Generator) -> "MliLayerParams":
        d, k, hq = cfg.d_model, cfg.k, cfg.heads * cfg.head_dim
        a_in = 2 * d if cfg.interaction_op == "concat" else d
        p = lambda arr: Tensor(arr, requires_grad=True)  # noqa: E731
        z = lambda n: Tensor(np.zeros(n), requires_grad=True)  # noqa: E731
        kw = dict(
            W_R=p(_uniform(rng, d, (k, d))), b_R=z(k),
            W_E=p(_uniform(rng, d, (k, d))), b_E=z(k),
            W_A=p(_uniform(rng, a_in, (a_in, d))), b_A=z(d),
            W_c=p(_uniform(rng, d, (d, d))), b_c=z(d),
            W_p=p(_uniform(rng, k * k, (k * k, k * k))), b_p=z(k * k),
            W_qr=p(_uniform(rng, d, (d, hq))), b_qr=z(hq),
            W_qe=p(_uniform(rng, d, (d, hq))), b_qe=z(hq),
            W_k=p(_uniform(rng, d, (d, hq))), b_k=z(hq),
        )
        if cfg.value_proj:
            kw.update(
                W_v=p(_uniform(rng, d, (d, hq))), b_v=z(hq),
                W_or=p(_uniform(rng, hq, (hq, d))), b_or=z(d),
                W_oe=p(_uniform(rng, hq, (hq, d))), b_oe=z(d),
            )
        return cls(**kw)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                yield f.name, t

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named())

    def zero_value_path(self) -> None:
        """Zero the value and output projections so the block adds nothing."""
        for name in ("W_v", "b_v", "W_or", "b_or", "W_oe", "b_oe"):
            t = getattr(self, name)
            if t is not None:
                t.data[...] = 0.0


def parameter_count(cfg: MliConfig) -> int:
    """Closed-form size of :class:`MliLayerParams` for ``cfg``."""
    d, k, hq = cfg.d_model, cfg.k, cfg.heads * cfg.head_dim
    a_in = 2 * d if cfg.interaction_op == "concat" else d
    n = 2 * (k * d + k)                # summaries
    n += a_in * d + d                  # interaction
    n += d * d + d + k ** 4 + k ** 2   # propagation
    n += 3 * (d * hq + hq)             # two query maps, one key map
    if cfg.value_proj:
        n += d * hq + hq + 2 * (hq * d + d)
    return n


@dataclass
class LayerTrace:
    """Attention maps and latents of one block, as plain arrays."""

    L_R: np.ndarray      # (k, M) summary weights over regions
    L_E: np.ndarray      # (k, N)
    U_R: np.ndarray      # (H, M, k^2) aggregation weights per head
    U_E: np.ndarray      # (H, N, k^2)
    R_bar: np.ndarray
    E_bar: np.ndarray
    A_hat: np.ndarray    # (k^2, d)


@dataclass
class AttentionTrace:
    layers: list = field(default_factory=list)

    def to_json(self, sample: int = 0) -> dict:
        """Per-layer maps of one batch element as row-major lists with shapes."""
        out = []
        for lt in self.layers:
            rec = {}
            for name in ("L_R", "L_E", "U_R", "U_E"):
                arr = getattr(lt, name)
                if arr.ndim == (3 if name.startswith("L") else 4):
                    arr = arr[sample]
                rec[name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            out.append(rec)
        return {"layers": out}


# ---------------------------------------------------------------------------
# the four stages


def summarize(X: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax-pooled summaries: ``L = softmax_rows(W X^T + b)``, ``X_bar = L X``."""
    if W.shape[-1] != X.shape[-1]:
        raise T.DimensionError(f"summary weight {W.shape} does not match features {X.shape}")
    logits = T.transpose(T.linear(X, T.transpose(W), b))
    L = T.softmax_rows(logits)
    return L, T.matmul(L, X)


def _pair_index(k: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(k), k)
    cols = np.tile(np.arange(k), k)
    return rows, cols


def interact(R_bar: Tensor, E_bar: Tensor, op: str, W_A: Tensor, b_A: Tensor) -> Tensor:
    """Fuse every (region summary i, word summary j) pair into ``A[..., i, j, :]``."""
    if R_bar.shape != E_bar.shape:
        raise T.DimensionError(f"summaries differ in shape: {R_bar.shape} vs {E_bar.shape}")
    k, d = R_bar.shape[-2:]
    ri, ej = _pair_index(k)
    left, right = T.take_rows(R_bar, ri), T.take_rows(E_bar, ej)
    if op == "product":
        fused = T.mul(left, right)
    elif op == "addition":
        fused = T.add(left, right)
    elif op == "concat":
        fused = T.concat_cols(left, right)
    else:
        raise ConfigError(f"unknown interaction operator {op!r}")
    out = T.linear(fused, W_A, b_A)
    return T.reshape(out, R_bar.shape[:-2] + (k, k, W_A.shape[1]))


def propagate(A: Tensor, W_c: Tensor, b_c: Tensor, W_p: Tensor, b_p: Tensor) -> Tensor:
    """Channel map plus pair-mixing map on the flattened pair grid (row-major (i, j))."""
    k = A.shape[-2]
    flat = T.reshape(A, A.shape[:-3] + (k * k, A.shape[-1]))
    channel = T.linear(flat, W_c, b_c)
    pairs = T.transpose(T.linear(T.transpose(flat), T.transpose(W_p), b_p))
    return T.add(channel, pairs)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, H*w) -> (..., H, n, w)
    lead = x.shape[:-2]
    n, hw = x.shape[-2:]
    x = T.reshape(x, lead + (n, heads, hw // heads))
    b = len(lead)
    return T.permute(x, tuple(range(b)) + (b + 1, b, b + 2))


def _merge_heads(x: Tensor) -> Tensor:
    # (..., H, n, w) -> (..., n, H*w)
    lead = x.shape[:-3]
    h, n, w = x.shape[-3:]
    b = len(lead)
    x = T.permute(x, tuple(range(b)) + (b + 1, b, b + 2))
    return T.reshape(x, lead + (n, h * w))


def latent_keys_values(A_hat: Tensor, params: MliLayerParams, cfg: MliConfig) -> tuple[Tensor, Tensor]:
    keys = _split_heads(T.linear(A_hat, params.W_k, params.b_k), cfg.heads)
    if cfg.value_proj:
        values = _split_heads(T.linear(A_hat, params.W_v, params.b_v), cfg.heads)
    else:
        values = _split_heads(A_hat, 1)
    return keys, values


def aggregate(
    X: Tensor,
    A_hat: Tensor,
    params: MliLayerParams,
    cfg: MliConfig,
    modality: str = "R",
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
    keys_values: Optional[tuple[Tensor, Tensor]] = None,
) -> tuple[Tensor, Tensor]:
    """Residual key-query read-out from the fused pairs; returns ``(X_U, U)``.

    ``U`` has shape (..., H, n, k^2); each query row is a distribution over
    the k^2 latent pairs.
    """
    if modality not in ("R", "E"):
        raise ValueError(f"modality must be 'R' or 'E', got {modality!r}")
    tag = "r" if modality == "R" else "e"
    keys, values = keys_values if keys_values is not None else latent_keys_values(A_hat, params, cfg)
    q = _split_heads(T.linear(X, getattr(params, f"W_q{tag}"), getattr(params, f"b_q{tag}")), cfg.heads)
    scores = T.scale(T.matmul(q, T.transpose(keys)), 1.0 / math.sqrt(cfg.head_dim))
    U = T.softmax_rows(scores)
    context = _merge_heads(T.matmul(U, values))
    if cfg.value_proj:
        context = T.linear(context, getattr(params, f"W_o{tag}"), getattr(params, f"b_o{tag}"))
    update = T.dropout(context, cfg.dropout_rate, rng, training)
    return T.add(X, update), U


def mli_forward(
    R: Tensor,
    E: Tensor,
    params: MliLayerParams,
    cfg: MliConfig,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> tuple[Tensor, Tensor, LayerTrace]:
    if R.shape[-2] < 1 or E.shape[-2] < 1:
        raise T.DimensionError("need at least one region and one word")
    L_R, R_bar = summarize(R, params.W_R, params.b_R)
    L_E, E_bar = summarize(E, params.W_E, params.b_E)
    A = interact(R_bar, E_bar, cfg.interaction_op, params.W_A, params.b_A)
    A_hat = propagate(A, params.W_c, params.b_c, params.W_p, params.b_p)
    kv = latent_keys_values(A_hat, params, cfg)
    R_U, U_R = aggregate(R, A_hat, params, cfg, "R", rng, training, kv)
    E_U, U_E = aggregate(E, A_hat, params, cfg, "E", rng, training, kv)
    trace = LayerTrace(
        L_R=L_R.data, L_E=L_E.data, U_R=U_R.data, U_E=U_E.data,
        R_bar=R_bar.data, E_bar=E_bar.data, A_hat=A_hat.data,
    )
    return R_U, E_U, trace
