"""Stacked MLI network with pooled product fusion and a linear answer classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .mli import AttentionTrace, ConfigError, MliConfig, MliLayerParams, mli_forward, _uniform
from .tensor import Tape, Tensor


@dataclass
class MlinModel:
    cfg: MliConfig
    d_in: int
    num_classes: int
    proj_r_w: Tensor
    proj_r_b: Tensor
    proj_e_w: Tensor
    proj_e_b: Tensor
    layers: list
    cls_w: Tensor
    cls_b: Tensor

    @classmethod
    def init(cls, cfg: MliConfig, d_in: int, num_classes: int, seed: int = 0) -> "MlinModel":
        """Fresh model; weights uniform in +-1/sqrt(fan_in), biases zero.

        When question tokens arrive one-hot encoded, ``proj_e_w`` is exactly a
        learned word-embedding table.
        """
        if d_in < 1 or num_classes < 1:
            raise ConfigError(f"d_in and num_classes must be positive ({d_in}, {num_classes})")
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        p = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
        model = cls(
            cfg=cfg,
            d_in=d_in,
            num_classes=num_classes,
            proj_r_w=p(_uniform(rng, d_in, (d_in, d))),
            proj_r_b=p(np.zeros(d)),
            proj_e_w=p(_uniform(rng, d_in, (d_in, d))),
            proj_e_b=p(np.zeros(d)),
            layers=[MliLayerParams.init(cfg, rng) for _ in range(cfg.stacks)],
            cls_w=p(_uniform(rng, d, (d, num_classes))),
            cls_b=p(np.zeros(num_classes)),
        )
        return model

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("input_r.weight", self.proj_r_w),
            ("input_r.bias", self.proj_r_b),
            ("input_e.weight", self.proj_e_w),
            ("input_e.bias", self.proj_e_b),
        ]
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{name}", t) for name, t in layer.named())
        out += [("classifier.weight", self.cls_w), ("classifier.bias", self.cls_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def forward(
    model: MlinModel,
    R_in: Tensor,
    E_in: Tensor,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> tuple[Tensor, AttentionTrace]:
    """Logits for one sample (M, d_in)/(N, d_in) or a batch (B, M, d_in)/(B, N, d_in)."""
    if R_in.shape[-1] != model.d_in or E_in.shape[-1] != model.d_in:
        raise ConfigError(
            f"feature width mismatch: model expects {model.d_in}, got regions {R_in.shape} and words {E_in.shape}"
        )
    if R_in.shape[:-2] != E_in.shape[:-2]:
        raise ConfigError(f"batch axes differ: {R_in.shape} vs {E_in.shape}")
    cfg = model.cfg
    R = T.linear(R_in, model.proj_r_w, model.proj_r_b)
    E = T.linear(E_in, model.proj_e_w, model.proj_e_b)
    trace = AttentionTrace()
    for layer in model.layers:
        R, E, lt = mli_forward(R, E, layer, cfg, rng, training)
        trace.layers.append(lt)
    fused = T.mul(T.mean_rows(R), T.mean_rows(E))
    fused = T.dropout(fused, cfg.dropout_rate, rng, training)
    return T.linear(fused, model.cls_w, model.cls_b), trace


def loss(logits: Tensor, labels) -> Tensor:
    return T.cross_entropy(logits, labels)


def _as_batch(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def predict(model: MlinModel, R: np.ndarray, E: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, _as_batch(R), _as_batch(E))
    return np.argmax(logits.data, axis=-1)


def evaluate(model: MlinModel, dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions with dropout off."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for R, E, labels in dataset.batches(batch_size):
        correct += int(np.sum(predict(model, R, E) == labels))
    return correct / len(dataset)


def _batch_loss(model: MlinModel, R: np.ndarray, E: np.ndarray, labels: np.ndarray) -> Tensor:
    logits, _ = forward(model, Tensor(R), Tensor(E))
    return loss(logits, labels)


# Below this norm a gradient is indistinguishable from central-difference
# rounding noise, so a relative error is meaningless.
ZERO_GRAD_FLOOR = 1e-8


@dataclass
class GradcheckResult:
    worst: dict = field(default_factory=dict)  # parameter name -> relative error
    zero: dict = field(default_factory=dict)   # name -> absolute error, for identically-zero gradients

    def passed(self, tol: float) -> bool:
        return (all(err < tol for err in self.worst.values())
                and all(err < ZERO_GRAD_FLOOR for err in self.zero.values()))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error between two gradients of one parameter group."""
    num = float(np.linalg.norm(analytic - numeric))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-300)
    return num / den


def randomize_parameters(model: MlinModel, seed: int, scale: float = 0.5) -> None:
    """Move every parameter to a generic point, uniform in [-scale, scale].

    Fan-in init leaves the pooled summaries almost uniform, which shrinks the
    query/key gradients to the finite-difference noise floor; much larger
    scales saturate the softmaxes.  0.5 keeps every path active.
    """
    rng = np.random.default_rng(seed)
    for _, t in model.named_parameters():
        t.data[...] = rng.uniform(-scale, scale, size=t.shape)


def gradcheck(
    model: MlinModel,
    samples: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    eps: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> GradcheckResult:
    """Compare tape gradients with central differences for every parameter group.

    ``samples`` is a list of batches ``(R, E, labels)``; the objective is the
    sum of their mean cross-entropies.  Dropout is off.  Groups whose analytic
    and numeric gradients are both below ``ZERO_GRAD_FLOOR`` (the summary and
    key biases, which only shift softmax logits uniformly) are scored by
    absolute error instead.
    """
    def objective() -> float:
        return sum(float(_batch_loss(model, R, E, y).data) for R, E, y in samples)

    model.zero_grad()
    for R, E, y in samples:
        with Tape() as tape:
            out = _batch_loss(model, R, E, y)
        tape.backward(out)

    wanted = set(names) if names is not None else None
    result = GradcheckResult()
    for name, param in model.named_parameters():
        if wanted is not None and name not in wanted:
            continue
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        numeric = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = objective()
            flat[i] = orig - eps
            down = objective()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        if max(np.linalg.norm(analytic), np.linalg.norm(numeric)) < ZERO_GRAD_FLOOR:
            result.zero[name] = float(np.linalg.norm(analytic - numeric))
        else:
            result.worst[name] = relative_error(analytic, numeric)
    model.zero_grad()
    return result
