"""Small convolutional probe network with hand-written forward/backward.

Architecture: ``[conv(same, stride 1) -> ReLU -> 2x2 max-pool] * L`` then
flatten and a linear head. Parameters live in one flat list in declaration
order ``[w0, b0, w1, b1, ..., head_w, head_b]``; gradients and momentum
buffers use the same layout.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DomainError, StructuralError
from .numcore import Rng

DEFAULT_CONV_LAYERS = ((8, 3), (16, 3))


@dataclass(frozen=True)
class ProbeSpec:
    input_channels: int = 3
    input_side: int = 16
    conv_layers: tuple[tuple[int, int], ...] = DEFAULT_CONV_LAYERS
    head_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple((int(f), int(k)) for f, k in self.conv_layers))
        if self.input_channels < 1 or self.input_side < 1:
            raise StructuralError("input channels and side must be >= 1")
        if not self.conv_layers:
            raise StructuralError("probe needs at least one conv layer")
        for f, k in self.conv_layers:
            if f < 1:
                raise StructuralError(f"filter count must be >= 1, got {f}")
            if k < 1 or k % 2 == 0:
                raise StructuralError(f"kernel side must be odd and >= 1, got {k}")
        if self.head_classes < 1:
            raise StructuralError("head_classes must be >= 1")
        if self.feature_side < 1:
            raise StructuralError(
                f"input side {self.input_side} too small for {len(self.conv_layers)} pool stages"
            )

    @property
    def total_filters(self) -> int:
        return sum(f for f, _ in self.conv_layers)

    @property
    def feature_side(self) -> int:
        side = self.input_side
        for _ in self.conv_layers:
            side //= 2
        return side

    @property
    def feature_dim(self) -> int:
        return self.conv_layers[-1][0] * self.feature_side ** 2

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        c = self.input_channels
        for f, k in self.conv_layers:
            shapes.append((f, c, k, k))
            shapes.append((f,))
            c = f
        shapes.append((self.feature_dim, self.head_classes))
        shapes.append((self.head_classes,))
        return shapes

    def header_ints(self) -> list[int]:
        out = [self.input_channels, self.input_side, len(self.conv_layers)]
        for f, k in self.conv_layers:
            out += [f, k]
        out.append(self.head_classes)
        return out


@dataclass
class ProbeState:
    params: list[np.ndarray]
    momentum: list[np.ndarray]
    head_fitted: bool = False

    @property
    def n_conv(self) -> int:
        return (len(self.params) - 2) // 2

    @property
    def conv_params(self) -> list[np.ndarray]:
        return self.params[:-2]

    @property
    def head_weight(self) -> np.ndarray:
        return self.params[-2]

    @property
    def head_bias(self) -> np.ndarray:
        return self.params[-1]

    def copy(self) -> "ProbeState":
        return ProbeState([p.copy() for p in self.params], [m.copy() for m in self.momentum], self.head_fitted)

    def with_head(self, weight: np.ndarray, bias: np.ndarray, fitted: bool = True) -> "ProbeState":
        params = [p.copy() for p in self.params[:-2]] + [np.array(weight, dtype=float), np.array(bias, dtype=float)]
        return ProbeState(params, [np.zeros_like(p) for p in params], fitted)

    def reset_momentum(self) -> "ProbeState":
        return replace(self, momentum=[np.zeros_like(p) for p in self.params])

    def check(self, spec: ProbeSpec) -> None:
        shapes = spec.param_shapes()
        if len(self.params) != len(shapes) or len(self.momentum) != len(shapes):
            raise StructuralError("parameter count does not match probe spec")
        for p, m, s in zip(self.params, self.momentum, shapes):
            if p.shape != s or m.shape != s:
                raise StructuralError(f"parameter shape {p.shape} does not match spec shape {s}")


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise StructuralError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise StructuralError("labels and images differ in length")


@dataclass
class ForwardCache:
    owner: ProbeState
    inputs: list[np.ndarray] = field(default_factory=list)
    relu_masks: list[np.ndarray] = field(default_factory=list)
    pool_idx: list[np.ndarray] = field(default_factory=list)
    features: np.ndarray | None = None


def init_probe(spec: ProbeSpec, rng: Rng) -> ProbeState:
    """He-uniform weights (variance 2/fan_in), zero biases, zero momentum."""
    if not isinstance(spec, ProbeSpec):
        raise StructuralError("init_probe needs a ProbeSpec")
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        params.append(rng.gen.uniform(-bound, bound, size=shape))
    return ProbeState(params, [np.zeros_like(p) for p in params])


def _images(batch) -> np.ndarray:
    if isinstance(batch, Batch):
        return batch.images
    return np.ascontiguousarray(batch, dtype=np.float64)


def extract(state: ProbeState, spec: ProbeSpec, batch, cache: ForwardCache | None = None) -> np.ndarray:
    """Run the conv stack only; returns flattened features (N, feature_dim)."""
    x = _images(batch)
    if x.ndim != 4 or x.shape[1:] != (spec.input_channels, spec.input_side, spec.input_side):
        raise StructuralError(
            f"batch shape {x.shape[1:]} does not match probe input "
            f"{(spec.input_channels, spec.input_side, spec.input_side)}"
        )
    if len(state.params) != len(spec.param_shapes()):
        raise StructuralError("probe state does not match spec")
    a = x
    for layer in range(len(spec.conv_layers)):
        w, b = state.params[2 * layer], state.params[2 * layer + 1]
        z = kernels.conv2d_forward(a, w, b)
        mask = z > 0
        r = np.where(mask, z, 0.0)
        pooled, idx = kernels.maxpool2_forward(r)
        if cache is not None:
            cache.inputs.append(a)
            cache.relu_masks.append(mask)
            cache.pool_idx.append(idx)
        a = pooled
    feats = a.reshape(len(a), -1)
    if cache is not None:
        cache.features = feats
    return feats


def forward(state: ProbeState, spec: ProbeSpec, batch) -> tuple[np.ndarray, ForwardCache]:
    cache = ForwardCache(owner=state)
    feats = extract(state, spec, batch, cache)
    logits = feats @ state.head_weight + state.head_bias
    return logits, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(labels) != len(logits):
        raise StructuralError("logits must be (N, C) with one label per row")
    n, c = logits.shape
    if n == 0:
        raise DomainError("cross-entropy of an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError("label out of range for logits")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, labels]))
    d = np.exp(z - logsumexp[:, None])
    d[rows, labels] -= 1.0
    return loss, d / n


def backward(
    state: ProbeState,
    spec: ProbeSpec,
    cache: ForwardCache,
    dlogits: np.ndarray,
    per_sample: bool = False,
    head: bool = True,
) -> list[np.ndarray]:
    """Gradients of the loss with respect to every parameter.

    With ``per_sample`` each gradient carries a leading sample axis and
    ``dlogits`` rows are treated as independent per-sample losses. With
    ``head=False`` the head entries are returned as ``None``.
    """
    if cache.owner is not state:
        raise StructuralError("stale forward cache: it was built from a different probe state")
    feats = cache.features
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if feats is None or dlogits.shape != (len(feats), spec.head_classes):
        raise StructuralError("dlogits do not match the cached forward pass")
    n_layers = len(spec.conv_layers)
    grads: list = [None] * (2 * n_layers + 2)
    if head:
        if per_sample:
            grads[-2] = np.einsum("nf,nc->nfc", feats, dlogits)
            grads[-1] = dlogits.copy()
        else:
            grads[-2] = feats.T @ dlogits
            grads[-1] = dlogits.sum(axis=0)
    da = (dlogits @ state.head_weight.T).reshape(
        len(feats), spec.conv_layers[-1][0], spec.feature_side, spec.feature_side
    )
    for layer in reversed(range(n_layers)):
        x_in = cache.inputs[layer]
        h, w = x_in.shape[2], x_in.shape[3]
        dr = kernels.maxpool2_backward(np.ascontiguousarray(da), cache.pool_idx[layer], h, w)
        dz = np.where(cache.relu_masks[layer], dr, 0.0)
        k = spec.conv_layers[layer][1]
        dw = kernels.conv2d_grad_weight(x_in, dz, k)
        db = dz.sum(axis=(2, 3))
        if per_sample:
            grads[2 * layer], grads[2 * layer + 1] = dw, db
        else:
            grads[2 * layer], grads[2 * layer + 1] = dw.sum(axis=0), db.sum(axis=0)
        if layer > 0:
            da = kernels.conv2d_grad_input(dz, state.params[2 * layer])
    return grads


def sgd_momentum_step(state: ProbeState, gradient: Sequence[np.ndarray], lr: float, momentum: float) -> ProbeState:
    """``buf <- momentum * buf + g``; ``w <- w - lr * buf``. Returns a new state."""
    if lr < 0:
        raise DomainError(f"learning rate must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise DomainError(f"momentum must be in [0, 1), got {momentum}")
    if len(gradient) != len(state.params):
        raise StructuralError("gradient layout does not match parameters")
    params, bufs = [], []
    for p, m, g in zip(state.params, state.momentum, gradient):
        if g is None:
            params.append(p.copy())
            bufs.append(m.copy())
            continue
        if g.shape != p.shape:
            raise StructuralError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        buf = momentum * m + g
        params.append(p - lr * buf)
        bufs.append(buf)
    return ProbeState(params, bufs, state.head_fitted)


def train_minibatch(
    state: ProbeState, spec: ProbeSpec, images: np.ndarray, labels: np.ndarray, lr: float, momentum: float
) -> tuple[ProbeState, float]:
    logits, cache = forward(state, spec, images)
    loss, dlogits = cross_entropy_loss(logits, labels)
    grads = backward(state, spec, cache, dlogits)
    return sgd_momentum_step(state, grads, lr, momentum), loss


def fit_linear_head(
    features: np.ndarray,
    labels,
    classes: int,
    epochs: int,
    lr: float,
    rng: Rng,
    batch_size: int = 32,
    momentum: float = 0.9,
) -> tuple[np.ndarray, np.ndarray]:
    """Train a softmax-regression head on frozen features; returns (W, b).

    Starts from zero weights, so the initial loss is ``ln(classes)``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) == 0:
        raise DomainError("fit_linear_head needs a non-empty (N, D) feature matrix")
    if epochs < 1:
        raise DomainError(f"epochs must be >= 1, got {epochs}")
    if not np.all(np.isfinite(features)):
        raise DomainError("features contain non-finite values")
    n, d = features.shape
    w = np.zeros((d, classes))
    b = np.zeros(classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            f = features[idx]
            _, dl = cross_entropy_loss(f @ w + b, labels[idx])
            vw = momentum * vw + f.T @ dl
            vb = momentum * vb + dl.sum(axis=0)
            w = w - lr * vw
            b = b - lr * vb
    return w, b


def predict_logits(state: ProbeState, spec: ProbeSpec, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), chunk):
        logits, _ = forward(state, spec, images[start:start + chunk])
        out.append(logits)
    if not out:
        return np.zeros((0, spec.head_classes))
    return np.concatenate(out)


def extractor_fingerprint(state: ProbeState, spec: ProbeSpec) -> str:
    """Hash of the probe shape and the feature-extractor weights (head excluded)."""
    h = hashlib.sha256()
    h.update(struct.pack(f"<{len(spec.header_ints())}i", *spec.header_ints()))
    for p in state.conv_params:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def state_to_bytes(state: ProbeState, spec: ProbeSpec) -> bytes:
    """Flat record: spec header as little-endian int32, then weights as little-endian float64."""
    state.check(spec)
    header = spec.header_ints()
    out = [struct.pack(f"<{len(header)}i", *header)]
    for p in state.params:
        out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


def state_from_bytes(data: bytes) -> tuple[ProbeSpec, ProbeState]:
    if len(data) < 12:
        raise StructuralError("probe record truncated in header")
    c, side, n_layers = struct.unpack_from("<3i", data, 0)
    if n_layers < 1:
        raise StructuralError(f"invalid layer count {n_layers} in probe record")
    n_ints = 3 + 2 * n_layers + 1
    if len(data) < 4 * n_ints:
        raise StructuralError("probe record truncated in header")
    ints = struct.unpack_from(f"<{n_ints}i", data, 0)
    layers = tuple((ints[3 + 2 * i], ints[4 + 2 * i]) for i in range(n_layers))
    spec = ProbeSpec(c, side, layers, ints[-1])
    offset = 4 * n_ints
    params = []
    for shape in spec.param_shapes():
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise StructuralError("probe record truncated in weights")
        params.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
        offset = end
    if offset != len(data):
        raise StructuralError(f"{len(data) - offset} trailing bytes after probe record")
    return spec, ProbeState(params, [np.zeros_like(p) for p in params])
