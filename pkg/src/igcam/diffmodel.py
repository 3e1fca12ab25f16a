"""Small multi-scale convolutional classifier with exact gradients and HVPs.

The classifier is a stack of strided convolutions, one per feature scale, each
followed by a smooth activation so that second derivatives exist everywhere.
Logits are a linear map of the global-average-pooled finest feature map. Every
scale also owns a bias-free linear head ``head{i}`` used by CAM extraction; the
finest head doubles as the classification head.

All differentiation runs through torch in float64 on a flat parameter vector.
Besides :class:`ConvClassifier` the module provides two analytic test models
(:class:`QuadraticModel`, :class:`LogisticModel`) that plug into the same
gradient / HVP / influence machinery.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError, PreconditionError

DTYPE = torch.float64

ACTIVATIONS = {
    "softplus": F.softplus,
    "tanh": torch.tanh,
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class ModelSpec:
    input_size: tuple[int, int, int] = (32, 32, 3)
    scale_factors: tuple[float, ...] = (1 / 2, 1 / 4, 1 / 8, 1 / 16)
    channels_per_scale: int = 8
    num_classes: int = 3
    rng_seed: int = 0
    kernel_size: int = 3
    activation: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "scale_factors", tuple(float(s) for s in self.scale_factors))
        h, w, c = self.input_size
        if min(h, w, c) < 1:
            raise ConfigurationError(f"bad input size {self.input_size}")
        if not self.scale_factors:
            raise ConfigurationError("at least one scale factor is required")
        if any(b >= a for a, b in zip(self.scale_factors, self.scale_factors[1:])):
            raise ConfigurationError("scale factors must be strictly decreasing")
        prev = 1.0
        for s in self.scale_factors:
            if not 0 < s <= 1:
                raise ConfigurationError(f"scale factor {s} outside (0, 1]")
            for n in (h, w):
                if abs(n * s - round(n * s)) > 1e-9 or round(n * s) < 1:
                    raise ConfigurationError(f"scale {s} does not divide input size {n}")
            ratio = prev / s
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigurationError(f"scale ratio {prev}/{s} is not an integer stride")
            prev = s
        if self.channels_per_scale < 1:
            raise ConfigurationError("channels_per_scale must be >= 1")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be a positive odd integer")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def scale_shapes(self) -> list[tuple[int, int]]:
        h, w, _ = self.input_size
        return [(round(h * s), round(w * s)) for s in self.scale_factors]

    @property
    def strides(self) -> list[int]:
        out, prev = [], 1.0
        for s in self.scale_factors:
            out.append(round(prev / s))
            prev = s
        return out

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "scale_factors": list(self.scale_factors),
            "channels_per_scale": self.channels_per_scale,
            "num_classes": self.num_classes,
            "rng_seed": self.rng_seed,
            "kernel_size": self.kernel_size,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class Segment(NamedTuple):
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


@dataclass
class ParamVector:
    """Flat parameter vector with a named segment table."""

    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigurationError("ParamVector values must be one-dimensional")
        if self.values.size != sum(s.length for s in self.layout):
            raise ConfigurationError(
                f"vector of length {self.values.size} does not match layout "
                f"total {sum(s.length for s in self.layout)}"
            )

    @property
    def dim(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.length].reshape(seg.shape)
        raise KeyError(name)

    def like(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64).copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.values, dtype=DTYPE)


def make_layout(named_shapes: Sequence[tuple[str, tuple[int, ...]]]) -> tuple[Segment, ...]:
    segs, off = [], 0
    for name, shape in named_shapes:
        n = int(np.prod(shape)) if shape else 1
        segs.append(Segment(name, off, n, tuple(shape)))
        off += n
    return tuple(segs)


@dataclass
class LabeledImage:
    pixels: np.ndarray
    image_labels: np.ndarray
    gt_mask: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.image_labels = np.asarray(self.image_labels, dtype=np.int64)
        if self.pixels.ndim != 3:
            raise PreconditionError("pixels must be H x W x C")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise PreconditionError(f"pixels of {self.id!r} outside [0, 1]")
        if self.image_labels.sum() < 1:
            raise PreconditionError(f"image {self.id!r} has no positive label")
        if self.gt_mask is not None:
            self.gt_mask = np.asarray(self.gt_mask, dtype=np.int64)
            if self.gt_mask.shape != self.pixels.shape[:2]:
                raise PreconditionError("gt_mask shape differs from image")
            if self.gt_mask.min() < 0 or self.gt_mask.max() > self.image_labels.size:
                raise PreconditionError("gt_mask holds an out-of-range class index")


@dataclass
class FeaturePyramid:
    grids: list[np.ndarray] = field(default_factory=list)
    scale_factors: tuple[float, ...] = ()


def bce_with_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample BCE averaged over the last (class) axis, overflow-free."""
    # -[y log s(l) + (1-y) log(1-s(l))] = softplus(l) - y*l
    return (F.softplus(logits) - labels * logits).mean(dim=-1)


def loss_bce(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise PreconditionError("logits and labels differ in length")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


class ConvClassifier:
    """Strided smooth-activation conv stack with GAP + linear heads."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        h, w, c = spec.input_size
        k, ch = spec.kernel_size, spec.channels_per_scale
        shapes = []
        c_in = c
        for i in range(len(spec.scale_factors)):
            shapes.append((f"conv{i}.weight", (ch, c_in, k, k)))
            shapes.append((f"conv{i}.bias", (ch,)))
            c_in = ch
        for i in range(len(spec.scale_factors)):
            shapes.append((f"head{i}.weight", (spec.num_classes, ch)))
        self.layout = make_layout(shapes)
        self.dim = sum(s.length for s in self.layout)
        self._act = ACTIVATIONS[spec.activation]

    def init_params(self) -> ParamVector:
        rng = np.random.default_rng(self.spec.rng_seed)
        values = np.empty(self.dim)
        for seg in self.layout:
            if seg.name.startswith("conv"):
                # weight and bias of one conv share fan_in
                fan_in = int(np.prod(self._weight_shape(seg.name)[1:]))
            else:
                fan_in = seg.shape[1]
            a = 1.0 / np.sqrt(fan_in)
            values[seg.offset : seg.offset + seg.length] = rng.uniform(-a, a, seg.length)
        return ParamVector(values, self.layout)

    def _weight_shape(self, name: str) -> tuple[int, ...]:
        prefix = name.split(".")[0]
        for seg in self.layout:
            if seg.name == prefix + ".weight":
                return seg.shape
        raise KeyError(name)

    def unflatten(self, theta: torch.Tensor) -> dict[str, torch.Tensor]:
        if theta.shape != (self.dim,):
            raise ConfigurationError(f"parameter vector has {theta.numel()} entries, model needs {self.dim}")
        return {s.name: theta[s.offset : s.offset + s.length].view(s.shape) for s in self.layout}

    def check_params(self, params: ParamVector):
        if params.dim != self.dim or tuple(params.layout) != tuple(self.layout):
            raise ConfigurationError("parameter layout does not match the model spec")

    def collate(self, samples: Sequence[LabeledImage]) -> tuple[torch.Tensor, torch.Tensor]:
        h, w, c = self.spec.input_size
        x = np.stack([s.pixels for s in samples]).transpose(0, 3, 1, 2)
        if x.shape[1:] != (c, h, w):
            raise ConfigurationError(f"image shape {x.shape[1:]} does not match spec {(c, h, w)}")
        y = np.stack([s.image_labels for s in samples])
        if y.shape[1] != self.spec.num_classes:
            raise ConfigurationError("label vector length differs from num_classes")
        return torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(y, dtype=DTYPE)

    def pyramid(self, theta: torch.Tensor, x: torch.Tensor) -> list[torch.Tensor]:
        p = self.unflatten(theta)
        feats, h = [], x
        pad = self.spec.kernel_size // 2
        for i, stride in enumerate(self.spec.strides):
            h = self._act(F.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=stride, padding=pad))
            feats.append(h)
        return feats

    def head(self, theta: torch.Tensor, scale: int = 0) -> torch.Tensor:
        return self.unflatten(theta)[f"head{scale}.weight"]

    def logits_from_pooled(self, theta: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
        return pooled @ self.head(theta, 0).T

    def logits(self, theta: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        finest = self.pyramid(theta, x)[0]
        return self.logits_from_pooled(theta, finest.mean(dim=(2, 3)))

    def sample_losses(self, theta: torch.Tensor, batch) -> torch.Tensor:
        x, y = batch
        return bce_with_logits(self.logits(theta, x), y)

    def batch_loss(self, theta: torch.Tensor, batch) -> torch.Tensor:
        return self.sample_losses(theta, batch).mean()


class QuadraticModel:
    """Per-sample loss 0.5 θᵀH₀θ − xᵀθ, so the empirical Hessian is exactly H₀."""

    def __init__(self, hessian):
        self.H = torch.as_tensor(np.asarray(hessian, dtype=np.float64))
        self.dim = self.H.shape[0]
        self.layout = make_layout([("theta", (self.dim,))])

    def collate(self, samples):
        return torch.as_tensor(np.stack([np.asarray(s, dtype=np.float64) for s in samples]))

    def sample_losses(self, theta, batch):
        return 0.5 * theta @ self.H @ theta - batch @ theta

    def batch_loss(self, theta, batch):
        return self.sample_losses(theta, batch).mean()


class LogisticModel:
    """L2-regularised logistic regression; samples are ``(features, label)`` pairs."""

    def __init__(self, dim: int, l2: float = 1e-2):
        self.dim = dim
        self.l2 = l2
        self.layout = make_layout([("w", (dim,))])

    def collate(self, samples):
        x = torch.as_tensor(np.stack([np.asarray(s[0], dtype=np.float64) for s in samples]))
        y = torch.as_tensor(np.array([float(s[1]) for s in samples]))
        return x, y

    def sample_losses(self, theta, batch):
        x, y = batch
        z = x @ theta
        return F.softplus(z) - y * z + 0.5 * self.l2 * (theta @ theta)

    def batch_loss(self, theta, batch):
        return self.sample_losses(theta, batch).mean()


@functools.lru_cache(maxsize=32)
def _classifier_for(spec: ModelSpec) -> ConvClassifier:
    return ConvClassifier(spec)


def as_model(model_or_spec: Any):
    if isinstance(model_or_spec, ModelSpec):
        return _classifier_for(model_or_spec)
    return model_or_spec


def _check_layout(model, params: ParamVector):
    if params.dim != model.dim or tuple(params.layout) != tuple(model.layout):
        raise ConfigurationError("parameter layout does not match the model")


def forward(spec, params: ParamVector, image: LabeledImage) -> tuple[FeaturePyramid, np.ndarray]:
    model = as_model(spec)
    _check_layout(model, params)
    x, _ = model.collate([image])
    with torch.no_grad():
        theta = params.tensor()
        feats = model.pyramid(theta, x)
        logits = model.logits_from_pooled(theta, feats[0].mean(dim=(2, 3)))
    pyr = FeaturePyramid([f[0].numpy().copy() for f in feats], model.spec.scale_factors)
    return pyr, logits[0].numpy().copy()


def _grad_t(model, theta: torch.Tensor, batch) -> torch.Tensor:
    theta = theta.detach().requires_grad_(True)
    loss = model.batch_loss(theta, batch)
    (g,) = torch.autograd.grad(loss, theta)
    return g


def grad(model, params: ParamVector, sample) -> ParamVector:
    """Exact gradient of one sample's loss (or the mean over a list of samples)."""
    model = as_model(model)
    _check_layout(model, params)
    samples = sample if isinstance(sample, list) else [sample]
    g = _grad_t(model, params.tensor(), model.collate(samples))
    return params.like(g.numpy())


def per_sample_grads(model, params: ParamVector, samples: Sequence) -> np.ndarray:
    """Row i is the gradient of sample i's loss."""
    model = as_model(model)
    _check_layout(model, params)
    theta = params.tensor()
    return np.stack([_grad_t(model, theta, model.collate([s])).numpy() for s in samples])


def hvp_t(model, theta: torch.Tensor, batch, v: torch.Tensor) -> torch.Tensor:
    """Exact Hessian-vector product by double backward."""
    theta = theta.detach().requires_grad_(True)
    loss = model.batch_loss(theta, batch)
    (g,) = torch.autograd.grad(loss, theta, create_graph=True)
    (hv,) = torch.autograd.grad(g @ v, theta, allow_unused=True)
    if hv is None:
        return torch.zeros_like(theta)
    return hv.detach()


def hvp(model, params: ParamVector, dataset: Sequence, v: ParamVector) -> ParamVector:
    model = as_model(model)
    _check_layout(model, params)
    if len(dataset) == 0:
        raise PreconditionError("HVP needs a nonempty dataset")
    if v.dim != params.dim:
        raise ConfigurationError("direction layout differs from parameters")
    hv = hvp_t(model, params.tensor(), model.collate(list(dataset)), v.tensor())
    return params.like(hv.numpy())


def hvp_fd(model, params: ParamVector, dataset: Sequence, v: ParamVector, step: Optional[float] = None) -> ParamVector:
    """Central finite difference of gradients along v, used to cross-check :func:`hvp`."""
    model = as_model(model)
    _check_layout(model, params)
    if len(dataset) == 0:
        raise PreconditionError("HVP needs a nonempty dataset")
    vmax = float(np.max(np.abs(v.values))) if v.dim else 0.0
    if vmax == 0.0:
        return params.zeros_like()
    h = step if step is not None else 1e-3 * (1.0 + vmax)
    # scale the probe so the displacement is h in the sup norm
    direction = torch.as_tensor(v.values / vmax)
    batch = model.collate(list(dataset))
    theta = params.tensor()
    gp = _grad_t(model, theta + h * direction, batch)
    gm = _grad_t(model, theta - h * direction, batch)
    return params.like(((gp - gm) / (2 * h) * vmax).numpy())
