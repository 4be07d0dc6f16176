"""Layer-graph models, reverse-mode gradients, Adam and a finite-difference checker.

Models are ordered lists of :class:`LayerSpec` with an explicit parameter
dictionary. Reverse-mode differentiation is delegated to ``torch.autograd``;
parameter initialisation and the optimiser are implemented here so that both
are reproducible from a seed and independent of torch's global RNG.

Shape rules (``s`` = stride, ``k`` = kernel, ``p`` = padding):

* ``conv2d`` / ``conv3d``: ``out = floor((n + 2p - k) / s) + 1`` per spatial axis.
* ``upconv2d`` / ``upconv3d``: nearest-neighbour x2 upsample, then a stride-1
  convolution, so ``out = 2n`` when ``k = 2p + 1``.
* normalisation, activations: shape preserving.
* ``skip_concat``: channel concatenation with the output of layer ``source``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Mapping

import numpy as np
import torch
import torch.nn.functional as F

INSTANCE_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, layer: int | str | None = None):
        super().__init__(message)
        self.layer = layer


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    UPCONV2D = "upconv2d"
    CONV3D = "conv3d"
    UPCONV3D = "upconv3d"
    INSTANCE_NORM = "instance_norm"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SKIP_CONCAT = "skip_concat"


_CONV_DIMS = {
    LayerKind.CONV2D: 2,
    LayerKind.UPCONV2D: 2,
    LayerKind.CONV3D: 3,
    LayerKind.UPCONV3D: 3,
}


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = True
    slope: float = LEAKY_SLOPE
    source: int | None = None

    @property
    def is_conv(self) -> bool:
        return self.kind in _CONV_DIMS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        d = dict(d)
        d["kind"] = LayerKind(d["kind"])
        return cls(**d)


def conv(cin, cout, *, kernel=3, stride=1, padding=None, bias=True, dims=2) -> LayerSpec:
    kind = LayerKind.CONV2D if dims == 2 else LayerKind.CONV3D
    if padding is None:
        padding = kernel // 2
    return LayerSpec(kind, cin, cout, kernel, stride, padding, bias)


def upconv(cin, cout, *, kernel=3, bias=True, dims=2) -> LayerSpec:
    kind = LayerKind.UPCONV2D if dims == 2 else LayerKind.UPCONV3D
    return LayerSpec(kind, cin, cout, kernel, 1, kernel // 2, bias)


def act(kind: LayerKind, slope: float = LEAKY_SLOPE) -> LayerSpec:
    return LayerSpec(kind, slope=slope)


def skip(source: int) -> LayerSpec:
    return LayerSpec(LayerKind.SKIP_CONCAT, source=source)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def _channel_plan(layers, in_channels: int) -> list[int]:
    """Output channel count of every layer; raises on a broken chain."""
    out: list[int] = []
    c = in_channels
    for i, spec in enumerate(layers):
        if spec.is_conv:
            if spec.in_channels != c:
                raise ShapeError(f"layer {i} ({spec.kind.value}) expects {spec.in_channels} channels, gets {c}")
            if spec.stride not in (1, 2):
                raise ShapeError(f"layer {i}: stride must be 1 or 2")
            if spec.kernel < 1 or spec.out_channels < 1:
                raise ShapeError(f"layer {i}: invalid kernel/out_channels")
            c = spec.out_channels
        elif spec.kind is LayerKind.SKIP_CONCAT:
            if spec.source is None or not 0 <= spec.source < i:
                raise ShapeError(f"layer {i}: skip source must index an earlier layer")
            c = c + out[spec.source]
        out.append(c)
    return out


class Model:
    """A sequential layer graph with optional skip connections.

    When ``residual`` is set the network output ``y`` is combined with the
    first input channel as ``clamp(x[:, :1] + 0.5 * y, 0, 1)``; residual
    models end in a ``tanh`` layer, so this is the usual bounded refinement
    head.
    """

    def __init__(
        self,
        layers,
        *,
        in_channels: int,
        spatial_dims: int = 2,
        residual: bool = False,
        seed: int = 0,
        config: Mapping[str, Any] | None = None,
        params: Mapping[str, torch.Tensor] | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        self.layers = tuple(layers)
        self.in_channels = in_channels
        self.spatial_dims = spatial_dims
        self.residual = residual
        self.seed = seed
        self.config = dict(config or {})
        self.channels = _channel_plan(self.layers, in_channels)
        for spec in self.layers:
            if spec.is_conv and _CONV_DIMS[spec.kind] != spatial_dims:
                raise ShapeError(f"{spec.kind.value} layer in a {spatial_dims}-D model")
        if residual and self.out_channels != 1:
            raise ShapeError("residual models must produce a single channel")
        if params is None:
            params = {k: torch.from_numpy(v) for k, v in self._init_params().items()}
        self.params = {k: v.to(dtype).detach().clone() for k, v in params.items()}
        expected = self._param_shapes()
        got = {k: tuple(v.shape) for k, v in self.params.items()}
        if got != expected:
            raise ShapeError(f"parameter shapes {got} do not match layer graph {expected}")

    @property
    def out_channels(self) -> int:
        return self.channels[-1] if self.channels else self.in_channels

    @property
    def dtype(self) -> torch.dtype:
        for v in self.params.values():
            return v.dtype
        return torch.float32

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, spec in enumerate(self.layers):
            if spec.is_conv:
                k = (spec.kernel,) * self.spatial_dims
                shapes[f"{i}.weight"] = (spec.out_channels, spec.in_channels, *k)
                if spec.bias:
                    shapes[f"{i}.bias"] = (spec.out_channels,)
        return shapes

    def _init_params(self) -> dict[str, np.ndarray]:
        rng = np.random.Generator(np.random.PCG64(self.seed))
        out = {}
        for name, shape in self._param_shapes().items():
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[1:]))
                out[name] = he_normal(rng, shape, fan_in)
            else:
                out[name] = np.zeros(shape)
        return out

    def copy(self, dtype: torch.dtype | None = None, params=None) -> "Model":
        return Model(
            self.layers,
            in_channels=self.in_channels,
            spatial_dims=self.spatial_dims,
            residual=self.residual,
            seed=self.seed,
            config=self.config,
            params=self.params if params is None else params,
            dtype=dtype or self.dtype,
        )

    def head_index(self) -> int:
        return max(i for i, s in enumerate(self.layers) if s.is_conv)

    def zero_head(self) -> "Model":
        """Zero the final convolution in place and return self."""
        i = self.head_index()
        for name in (f"{i}.weight", f"{i}.bias"):
            if name in self.params:
                self.params[name] = torch.zeros_like(self.params[name])
        return self

    def num_parameters(self) -> int:
        return sum(v.numel() for v in self.params.values())

    def __call__(self, x, params=None):
        return forward(self, x, params=params)


def _apply(spec: LayerSpec, i: int, h: torch.Tensor, outputs, params, nd: int) -> torch.Tensor:
    kind = spec.kind
    if spec.is_conv:
        w = params[f"{i}.weight"]
        b = params.get(f"{i}.bias")
        if kind in (LayerKind.UPCONV2D, LayerKind.UPCONV3D):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        convf = F.conv2d if nd == 2 else F.conv3d
        return convf(h, w, b, stride=spec.stride, padding=spec.padding)
    if kind is LayerKind.INSTANCE_NORM:
        return F.instance_norm(h, eps=INSTANCE_NORM_EPS)
    if kind is LayerKind.RELU:
        return F.relu(h)
    if kind is LayerKind.LEAKY_RELU:
        return F.leaky_relu(h, spec.slope)
    if kind is LayerKind.SIGMOID:
        return torch.sigmoid(h)
    if kind is LayerKind.TANH:
        return torch.tanh(h)
    if kind is LayerKind.SKIP_CONCAT:
        src = outputs[spec.source]
        if src.shape[2:] != h.shape[2:]:
            raise ShapeError(f"layer {i}: skip from layer {spec.source} has spatial shape "
                             f"{tuple(src.shape[2:])}, current is {tuple(h.shape[2:])}")
        return torch.cat([h, src], dim=1)
    raise ShapeError(f"unknown layer kind {kind}")


def forward(m: Model, x, params: Mapping[str, torch.Tensor] | None = None, check_finite: bool = False):
    """Run the model on ``x`` of shape ``(C, *spatial)`` or ``(N, C, *spatial)``.

    Numpy inputs give numpy outputs; tensors stay tensors (and keep the graph).
    """
    as_numpy = isinstance(x, np.ndarray)
    h = torch.from_numpy(np.ascontiguousarray(x)) if as_numpy else x
    h = h.to(m.dtype)
    unbatched = h.dim() == m.spatial_dims + 1
    if unbatched:
        h = h.unsqueeze(0)
    if h.dim() != m.spatial_dims + 2 or h.shape[1] != m.in_channels:
        raise ShapeError(f"model expects (N, {m.in_channels}, <{m.spatial_dims} spatial dims>), "
                         f"got {tuple(x.shape)}")
    params = m.params if params is None else params
    x0 = h
    outputs = []
    for i, spec in enumerate(m.layers):
        h = _apply(spec, i, h, outputs, params, m.spatial_dims)
        if check_finite and not torch.isfinite(h).all():
            raise NonFiniteError(f"non-finite values after layer {i} ({spec.kind.value})", layer=i)
        outputs.append(h)
    if m.residual:
        h = torch.clamp(x0[:, :1] + 0.5 * h, 0.0, 1.0)
    if unbatched:
        h = h.squeeze(0)
    if as_numpy:
        return h.detach().numpy()
    return h


def compute_gradients(m: Model, loss, batch, params=None) -> dict[str, torch.Tensor]:
    """d(loss)/d(param) for every parameter of ``m``.

    ``loss`` is any object with ``evaluate(output, target, input) -> scalar
    tensor`` (see :class:`progsynth.losses.LossSpec`).
    """
    inp, target = batch
    params = dict(m.params if params is None else params)
    if not params:
        return {}
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    inp_t = torch.as_tensor(inp).to(m.dtype)
    target_t = torch.as_tensor(target).to(m.dtype)
    out = forward(m, inp_t, params=leaves)
    value = loss.evaluate(out, target_t, inp_t)
    if not torch.isfinite(value):
        with torch.no_grad():
            forward(m, inp_t, params=leaves, check_finite=True)
        raise NonFiniteError(f"non-finite loss {value.item()} (all layer outputs finite)", layer="loss")
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    result = {}
    for (name, p), g in zip(leaves.items(), grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}", layer=name.split(".")[0])
        result[name] = g
    return result


def finite_diff_check(m: Model, loss, batch, eps: float = 1e-5, max_samples: int = 64, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Up to ``max_samples`` parameter entries are drawn per parameter tensor.
    The error of one entry is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    md = m.copy(dtype=torch.float64)
    if not md.params:
        return 0.0
    inp = torch.as_tensor(batch[0]).to(torch.float64)
    target = torch.as_tensor(batch[1]).to(torch.float64)
    analytic = compute_gradients(md, loss, (inp, target))
    rng = np.random.Generator(np.random.PCG64(seed))

    def value(params):
        with torch.no_grad():
            return float(loss.evaluate(forward(md, inp, params=params), target, inp))

    worst = 0.0
    for name, p in md.params.items():
        n = p.numel()
        picks = rng.choice(n, size=min(n, max_samples), replace=False)
        for flat in sorted(int(j) for j in picks):
            base = p.reshape(-1)[flat].item()
            probe = dict(md.params)
            shifted = p.clone()
            shifted.view(-1)[flat] = base + eps
            probe[name] = shifted
            up = value(probe)
            shifted.view(-1)[flat] = base - eps
            down = value(probe)
            numeric = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[flat].item()
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("Adam lr and eps must be positive")


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: AdamState):
    """One bias-corrected Adam update. Returns new ``(params, state)``."""
    if set(params) != set(grads):
        raise ShapeError("params and grads name different tensors")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m_prev = state.m.get(name)
            v_prev = state.v.get(name)
            m = (1 - b1) * g if m_prev is None else b1 * m_prev + (1 - b1) * g
            v = (1 - b2) * g * g if v_prev is None else b2 * v_prev + (1 - b2) * g * g
            step = (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
            new_params[name] = p - state.lr * step
            new_m[name] = m
            new_v[name] = v
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_params, new_state
