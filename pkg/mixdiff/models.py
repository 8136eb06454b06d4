"""
Denoisers: the exact analytic oracle for mixture data and a small MLP whose
hidden layers are modulated by timestep (and class) embeddings through AdaGN
The MLP carries its own reverse-mode pass; no autodiff framework is involved
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .mixture import GaussianMixture, _as_batch
from .schedules import NoiseSchedule, TimestepLike

logger = logging.getLogger(__name__)

NORM_VARIANCE_FLOOR = 1e-5
EMBEDDING_MAX_PERIOD = 10000.0


@dataclass
class DenoiserOutput:
    """Noise prediction plus the optional variance interpolant v"""
    eps: np.ndarray
    v: Optional[np.ndarray] = None


def analytic_eps(mix: GaussianMixture, xt: np.ndarray, t: TimestepLike,
                 sched: NoiseSchedule, y: Optional[np.ndarray] = None) -> DenoiserOutput:
    """
    Exact eps*(x_t) = -sqrt(1 - ab_t) grad log q_t(x_t)

    With y given, the score of the class-conditional q_t(x_t | y) is used.
    """
    t = sched.check_timestep(t)
    alpha_bar = sched.alpha_bar_at(t)
    if np.any(alpha_bar >= 1.0):
        raise ValueError("analytic eps needs alpha_bar_t < 1")
    score = mix.score(xt, alpha_bar, y)
    scale = np.sqrt(1.0 - alpha_bar)
    if scale.ndim:
        scale = scale.reshape(-1, 1)
    return DenoiserOutput(eps=-scale * score)


class AnalyticDenoiser:
    """
    Oracle denoiser for a known mixture

    Called like a trained model, with timesteps of the chain it was built
    for. The oracle has no variance head.
    """

    learns_variance = False

    def __init__(self, mixture: GaussianMixture, schedule: NoiseSchedule,
                 conditional: bool = False):
        self.mixture = mixture
        self.schedule = schedule
        self.conditional = conditional
        self.data_dim = mixture.dim

    def __call__(self, xt: np.ndarray, t: TimestepLike,
                 y: Optional[np.ndarray] = None) -> DenoiserOutput:
        if self.conditional and y is None:
            raise ValueError("conditional oracle needs a class label")
        return analytic_eps(self.mixture, xt, t, self.schedule,
                            y if self.conditional else None)


class CountingDenoiser:
    """Wraps a denoiser and counts how often it is evaluated"""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    @property
    def learns_variance(self) -> bool:
        return self.model.learns_variance

    @property
    def conditional(self) -> bool:
        return self.model.conditional

    @property
    def data_dim(self) -> int:
        return self.model.data_dim

    def __call__(self, xt, t, y=None) -> DenoiserOutput:
        self.calls += 1
        return self.model(xt, t, y)


def timestep_embedding(t: TimestepLike, dim: int) -> np.ndarray:
    """
    Interleaved sin/cos features of t at frequencies 10000^(-2i/dim)

    Returns shape (dim,) for a scalar t and (n, dim) for n timesteps.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dimension must be a positive even number, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = EMBEDDING_MAX_PERIOD ** (-2.0 * np.arange(dim // 2) / dim)
    args = t[..., None] * freqs
    emb = np.empty(t.shape + (dim,))
    emb[..., 0::2] = np.sin(args)
    emb[..., 1::2] = np.cos(args)
    return emb


def _group_norm(h: np.ndarray, group_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize each group of `group_size` features; returns (xhat, std, unfloored mask)"""
    n, width = h.shape
    if width % group_size:
        raise ValueError(f"width {width} is not divisible by group size {group_size}")
    grouped = h.reshape(n, width // group_size, group_size)
    mean = grouped.mean(axis=-1, keepdims=True)
    var = grouped.var(axis=-1, keepdims=True)
    mask = var > NORM_VARIANCE_FLOOR
    std = np.sqrt(np.maximum(var, NORM_VARIANCE_FLOOR))
    xhat = ((grouped - mean) / std).reshape(n, width)
    return xhat, std, mask


def _group_norm_backward(g_xhat: np.ndarray, xhat: np.ndarray, std: np.ndarray,
                         mask: np.ndarray, group_size: int) -> np.ndarray:
    n, width = g_xhat.shape
    g = g_xhat.reshape(n, width // group_size, group_size)
    xh = xhat.reshape(g.shape)
    # floored groups have a constant std, so the variance path drops out
    g_in = (g - g.mean(axis=-1, keepdims=True)
            - mask * xh * (g * xh).mean(axis=-1, keepdims=True)) / std
    return g_in.reshape(n, width)


def adagn(h: np.ndarray, y_s: np.ndarray, y_b: np.ndarray, group_size: int = 32) -> np.ndarray:
    """y_s * GroupNorm(h) + y_b with the group variance floored at 1e-5"""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != np.shape(y_s) or h.shape != np.shape(y_b):
        raise ValueError("adagn inputs must have equal shapes")
    batch, squeeze = _as_batch(h)
    xhat, _, _ = _group_norm(batch, group_size)
    out = np.asarray(y_s) * (xhat[0] if squeeze else xhat) + np.asarray(y_b)
    return out


def _silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def _silu_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass(frozen=True)
class MlpSpec:
    """
    Architecture of an embedding-modulated MLP

    kind is 'denoiser' (outputs eps and optionally v per dimension) or
    'classifier' (outputs num_classes logits). A conditional denoiser adds a
    class embedding of num_classes rows to the timestep embedding.
    """
    kind: str = "denoiser"
    data_dim: int = 2
    hidden_widths: Tuple[int, ...] = (128, 128, 128)
    embedding_dim: int = 64
    group_size: int = 32
    num_classes: int = 0
    conditional: bool = False
    learn_variance: bool = True
    activation: str = "silu"
    use_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.kind not in ("denoiser", "classifier"):
            raise ValueError(f"Unknown network kind: {self.kind}")
        if self.activation not in ("silu", "identity"):
            raise ValueError(f"Unknown activation: {self.activation}")
        if self.data_dim < 1 or not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("data_dim and every hidden width must be positive")
        if self.embedding_dim % 2:
            raise ValueError(f"embedding_dim must be even, got {self.embedding_dim}")
        if self.use_norm:
            for width in self.hidden_widths:
                if width % self.group_size:
                    raise ValueError(f"width {width} is not divisible by group size {self.group_size}")
        if (self.conditional or self.kind == "classifier") and self.num_classes < 1:
            raise ValueError("num_classes must be set for classifiers and conditional denoisers")

    @property
    def output_dim(self) -> int:
        if self.kind == "classifier":
            return self.num_classes
        return self.data_dim * (2 if self.learn_variance else 1)

    @property
    def has_class_embedding(self) -> bool:
        return self.kind == "denoiser" and self.conditional

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["hidden_widths"] = list(self.hidden_widths)
        return out

    @classmethod
    def from_dict(cls, data: Dict) -> "MlpSpec":
        return cls(**data)


@dataclass
class ForwardCache:
    """Intermediates kept by MlpNetwork.forward for the reverse pass"""
    x: np.ndarray
    emb: np.ndarray
    labels: Optional[np.ndarray]
    layers: List[Dict[str, np.ndarray]] = field(default_factory=list)
    squeeze: bool = False


class MlpNetwork:
    """
    Hidden layers apply affine -> AdaGN(., y_s, y_b) -> SiLU, where (y_s, y_b)
    is a per-layer linear projection of the timestep embedding (plus the
    class embedding when conditional). A linear head produces the outputs.
    """

    def __init__(self, spec: MlpSpec, params: Optional[Dict[str, np.ndarray]] = None,
                 seed: int = 0):
        self.spec = spec
        if params is None:
            params = self.init_parameters(np.random.default_rng(seed))
        self.params = self._checked(params)

    def parameter_shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        """Parameter names and shapes in declaration order"""
        spec = self.spec
        shapes = OrderedDict()
        fan_in = spec.data_dim
        for i, width in enumerate(spec.hidden_widths):
            shapes[f"layers.{i}.weight"] = (fan_in, width)
            shapes[f"layers.{i}.bias"] = (width,)
            if spec.use_norm:
                shapes[f"layers.{i}.proj.weight"] = (spec.embedding_dim, 2 * width)
                shapes[f"layers.{i}.proj.bias"] = (2 * width,)
            fan_in = width
        shapes["head.weight"] = (fan_in, spec.output_dim)
        shapes["head.bias"] = (spec.output_dim,)
        if spec.has_class_embedding:
            shapes["class_embedding"] = (spec.num_classes, spec.embedding_dim)
        return shapes

    def init_parameters(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        params = OrderedDict()
        for name, shape in self.parameter_shapes().items():
            if name.endswith("proj.bias"):
                width = shape[0] // 2
                params[name] = np.concatenate([np.ones(width), np.zeros(width)])
            elif name.endswith("proj.weight"):
                params[name] = rng.standard_normal(shape) * (0.1 / np.sqrt(shape[0]))
            elif name.endswith("weight"):
                params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
            elif name == "class_embedding":
                params[name] = rng.standard_normal(shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def _checked(self, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        shapes = self.parameter_shapes()
        if set(params) != set(shapes):
            raise ValueError(f"parameter names do not match the architecture: "
                             f"missing {sorted(set(shapes) - set(params))}, "
                             f"unexpected {sorted(set(params) - set(shapes))}")
        checked = OrderedDict()
        for name, shape in shapes.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite parameter values")
            checked[name] = arr
        return checked

    @property
    def conditional(self) -> bool:
        return self.spec.has_class_embedding

    @property
    def data_dim(self) -> int:
        return self.spec.data_dim

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _embed(self, t: TimestepLike, y, n: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        t = np.broadcast_to(np.asarray(t).reshape(-1), (n,))
        emb = timestep_embedding(t, self.spec.embedding_dim)
        if not self.conditional:
            if y is not None and self.spec.kind == "denoiser":
                raise ValueError("unconditional model takes no class label")
            return emb, None
        if y is None:
            raise ValueError("conditional model needs a class label")
        labels = np.broadcast_to(np.asarray(y, dtype=np.int64).reshape(-1), (n,))
        if labels.size and (labels.min() < 0 or labels.max() >= self.spec.num_classes):
            raise ValueError(f"class label out of range [0, {self.spec.num_classes})")
        return emb + self.params["class_embedding"][labels], labels

    def forward(self, xt: np.ndarray, t: TimestepLike, y=None) -> Tuple[np.ndarray, ForwardCache]:
        """
        Run the network

        Args:
            xt: points, shape (d,) or (n, d)
            t: timestep embedding input, scalar or (n,)
            y: class labels for conditional denoisers

        Returns:
            Raw outputs of shape (n, output_dim) and the cache for backward()
        """
        x, squeeze = _as_batch(xt)
        if x.shape[1] != self.spec.data_dim:
            raise ValueError(f"expected points of dimension {self.spec.data_dim}, got {x.shape[1]}")
        emb, labels = self._embed(t, y, len(x))
        cache = ForwardCache(x=x, emb=emb, labels=labels, squeeze=squeeze)

        h = x
        for i, width in enumerate(self.spec.hidden_widths):
            layer = {"h_in": h}
            a = h @ self.params[f"layers.{i}.weight"] + self.params[f"layers.{i}.bias"]
            if self.spec.use_norm:
                proj = emb @ self.params[f"layers.{i}.proj.weight"] + self.params[f"layers.{i}.proj.bias"]
                ys, yb = proj[:, :width], proj[:, width:]
                xhat, std, mask = _group_norm(a, self.spec.group_size)
                pre = ys * xhat + yb
                layer.update(xhat=xhat, std=std, mask=mask, ys=ys)
            else:
                pre = a
            layer["pre"] = pre
            h = _silu(pre) if self.spec.activation == "silu" else pre
            cache.layers.append(layer)

        out = h @ self.params["head.weight"] + self.params["head.bias"]
        cache.layers.append({"h_in": h})
        return out, cache

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """
        Reverse-mode pass for the scalar sum(grad_out * outputs)

        Returns:
            Gradients for every parameter (declaration order) and the
            gradient with respect to the input points
        """
        grad_out = np.asarray(grad_out, dtype=np.float64)
        n = len(cache.x)
        if grad_out.shape != (n, self.spec.output_dim):
            raise ValueError(f"upstream gradient shape {grad_out.shape} does not match "
                             f"outputs {(n, self.spec.output_dim)}")
        grads = OrderedDict((name, np.zeros_like(p)) for name, p in self.params.items())

        h_last = cache.layers[-1]["h_in"]
        grads["head.weight"] = h_last.T @ grad_out
        grads["head.bias"] = grad_out.sum(axis=0)
        g_h = grad_out @ self.params["head.weight"].T
        g_emb = np.zeros_like(cache.emb)

        for i in reversed(range(len(self.spec.hidden_widths))):
            layer = cache.layers[i]
            if self.spec.activation == "silu":
                g_pre = g_h * _silu_grad(layer["pre"])
            else:
                g_pre = g_h
            if self.spec.use_norm:
                g_ys = g_pre * layer["xhat"]
                g_a = _group_norm_backward(g_pre * layer["ys"], layer["xhat"], layer["std"],
                                           layer["mask"], self.spec.group_size)
                g_proj = np.concatenate([g_ys, g_pre], axis=1)
                grads[f"layers.{i}.proj.weight"] = cache.emb.T @ g_proj
                grads[f"layers.{i}.proj.bias"] = g_proj.sum(axis=0)
                g_emb += g_proj @ self.params[f"layers.{i}.proj.weight"].T
            else:
                g_a = g_pre
            grads[f"layers.{i}.weight"] = layer["h_in"].T @ g_a
            grads[f"layers.{i}.bias"] = g_a.sum(axis=0)
            g_h = g_a @ self.params[f"layers.{i}.weight"].T

        if self.conditional:
            np.add.at(grads["class_embedding"], cache.labels, g_emb)

        grad_x = g_h[0] if cache.squeeze else g_h
        return grads, grad_x

    def copy(self) -> "MlpNetwork":
        return type(self)(self.spec, OrderedDict((k, v.copy()) for k, v in self.params.items()))


class MlpDenoiser(MlpNetwork):
    """MLP predicting eps and, with a variance head, the interpolant v"""

    @property
    def learns_variance(self) -> bool:
        return self.spec.learn_variance

    def split_outputs(self, out: np.ndarray, squeeze: bool) -> DenoiserOutput:
        d = self.spec.data_dim
        eps = out[:, :d]
        v = out[:, d:] if self.learns_variance else None
        if squeeze:
            eps = eps[0]
            v = v[0] if v is not None else None
        return DenoiserOutput(eps=eps, v=v)

    def __call__(self, xt: np.ndarray, t: TimestepLike, y=None) -> DenoiserOutput:
        out, cache = self.forward(xt, t, y)
        return self.split_outputs(out, cache.squeeze)

    def output_gradient(self, grad_eps: np.ndarray, grad_v: Optional[np.ndarray], n: int) -> np.ndarray:
        """Stack upstream gradients on (eps, v) into the raw output layout"""
        d = self.spec.data_dim
        grad_eps = np.asarray(grad_eps, dtype=np.float64).reshape(n, -1)
        if grad_eps.shape != (n, d):
            raise ValueError(f"eps gradient must have shape {(n, d)}, got {grad_eps.shape}")
        if not self.learns_variance:
            if grad_v is not None:
                raise ValueError("model has no variance head")
            return grad_eps
        if grad_v is None:
            grad_v = np.zeros((n, d))
        grad_v = np.asarray(grad_v, dtype=np.float64).reshape(n, -1)
        if grad_v.shape != (n, d):
            raise ValueError(f"v gradient must have shape {(n, d)}, got {grad_v.shape}")
        return np.concatenate([grad_eps, grad_v], axis=1)


def mlp_forward(model: MlpDenoiser, xt: np.ndarray, t: TimestepLike, y=None) -> DenoiserOutput:
    return model(xt, t, y)


def mlp_backward(model: MlpDenoiser, xt: np.ndarray, t: TimestepLike, y,
                 grad_eps: np.ndarray, grad_v: Optional[np.ndarray] = None
                 ) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    Gradients of sum(grad_eps * eps + grad_v * v) w.r.t. parameters and xt

    Recomputes the forward intermediates.
    """
    out, cache = model.forward(xt, t, y)
    return model.backward(cache, model.output_gradient(grad_eps, grad_v, len(out)))
