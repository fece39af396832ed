"""Small deterministic feed-forward networks with hand-written backprop.

Networks are sequences of dense, batch-norm, activation and flatten layers
operating on float64 arrays of shape ``(batch, features)``.  Parameters live
in a :class:`ParamVector`, an ordered mapping ``(layer_id, role) -> array``.
Forward and backward passes are pure functions of ``(spec, params, inputs)``
except for train-mode batch norm with ``update_stats=True``, which writes the
running statistics in place.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

ACTIVATIONS = ("relu", "silu", "gelu", "mish", "identity")
LAYER_KINDS = ("dense", "batchnorm", "activation", "flatten")

# roles that carry the weight-space geometry (directions, balls, scaling)
GEOMETRIC_ROLES = ("weight", "bias")
TRAINABLE_ROLES = ("weight", "bias", "bn_gamma", "bn_beta")
BN_ROLES = ("bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var", "bn_eps")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GELU_SCALE = 1.702


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "identity"
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind in ("batchnorm", "activation", "flatten") and self.in_dim != self.out_dim:
            raise ShapeError(f"{self.kind} layer must preserve its width")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture plus an optional fixed input standardization.

    ``input_mean``/``input_std`` hold whitening statistics; they are applied
    inside the forward pass so attacks keep operating in the raw ``[0, 1]``
    input space.
    """

    layers: tuple[LayerSpec, ...]
    input_mean: tuple[float, ...] | None = None
    input_std: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer widths incompatible: {prev.kind}({prev.out_dim}) -> {nxt.kind}({nxt.in_dim})"
                )
        if (self.input_mean is None) != (self.input_std is None):
            raise ValueError("input_mean and input_std must be given together")
        if self.input_mean is not None:
            if len(self.input_mean) != self.input_dim or len(self.input_std) != self.input_dim:
                raise ShapeError("whitening statistics do not match input_dim")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def with_whitening(self, mean, std) -> "NetworkSpec":
        return NetworkSpec(self.layers, tuple(float(m) for m in mean), tuple(float(s) for s in std))

    def bn_followed(self) -> list[int]:
        """Indices of dense layers whose output feeds straight into batch norm."""
        return [
            i
            for i, (a, b) in enumerate(zip(self.layers, self.layers[1:]))
            if a.kind == "dense" and b.kind == "batchnorm"
        ]

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(layer) for layer in self.layers],
            "input_mean": list(self.input_mean) if self.input_mean is not None else None,
            "input_std": list(self.input_std) if self.input_std is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = tuple(LayerSpec(**layer) for layer in d["layers"])
        mean = d.get("input_mean")
        std = d.get("input_std")
        return cls(layers, tuple(mean) if mean is not None else None, tuple(std) if std is not None else None)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def mlp(
    input_dim: int,
    hidden: Sequence[int],
    num_classes: int,
    activation: str = "relu",
    batchnorm: str = "none",
) -> NetworkSpec:
    """Build a multi-layer perceptron spec.

    ``batchnorm`` is ``"none"``, ``"hidden"`` (BN after every hidden dense
    layer) or ``"all"`` (also after the logit layer, which makes every dense
    layer scale-invariant).
    """
    if batchnorm not in ("none", "hidden", "all"):
        raise ValueError(f"unknown batchnorm placement {batchnorm!r}")
    layers: list[LayerSpec] = []
    widths = [input_dim, *hidden]
    for a, b in zip(widths, widths[1:]):
        layers.append(LayerSpec("dense", a, b))
        if batchnorm != "none":
            layers.append(LayerSpec("batchnorm", b, b))
        layers.append(LayerSpec("activation", b, b, activation=activation))
    layers.append(LayerSpec("dense", widths[-1], num_classes))
    if batchnorm == "all":
        layers.append(LayerSpec("batchnorm", num_classes, num_classes))
    return NetworkSpec(tuple(layers))


# --------------------------------------------------------------------------
# parameters


Key = tuple[int, str]


@dataclass
class ParamVector:
    """Ordered ``(layer_id, role) -> float64 array`` mapping.

    Weights and biases are separate entries, so every per-layer operation in
    :mod:`robflat.geometry` treats a bias as its own layer.  The same type is
    used for weight-space directions; there the batch-norm entries are zero.
    """

    entries: dict[Key, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: Key) -> np.ndarray:
        return self.entries[key]

    def __setitem__(self, key: Key, value: np.ndarray) -> None:
        self.entries[key] = value

    def __iter__(self) -> Iterator[Key]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def keys(self) -> list[Key]:
        return list(self.entries)

    def geometric_keys(self) -> list[Key]:
        return [k for k in self.entries if k[1] in GEOMETRIC_ROLES]

    def trainable_keys(self) -> list[Key]:
        return [k for k in self.entries if k[1] in TRAINABLE_ROLES]

    def copy(self) -> "ParamVector":
        return ParamVector({k: v.copy() for k, v in self.entries.items()})

    def zeros_like(self) -> "ParamVector":
        return ParamVector({k: np.zeros_like(v) for k, v in self.entries.items()})

    def check_partition(self, other: "ParamVector") -> None:
        if list(self.entries) != list(other.entries):
            raise ShapeError("parameter partitions differ")
        for k, v in self.entries.items():
            if v.shape != other.entries[k].shape:
                raise ShapeError(f"shape mismatch for {k}: {v.shape} vs {other.entries[k].shape}")

    def layer_norms(self) -> dict[Key, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.entries.items() if k[1] in GEOMETRIC_ROLES}

    def num_geometric(self) -> int:
        return sum(self.entries[k].size for k in self.geometric_keys())

    def flat_geometric(self) -> np.ndarray:
        keys = self.geometric_keys()
        if not keys:
            return np.zeros(0)
        return np.concatenate([self.entries[k].ravel() for k in keys])

    def with_flat_geometric(self, flat: np.ndarray) -> "ParamVector":
        """Copy of ``self`` with geometric entries replaced by ``flat`` and bn entries zeroed."""
        out = self.zeros_like()
        pos = 0
        for k in self.geometric_keys():
            n = self.entries[k].size
            out.entries[k] = np.asarray(flat[pos : pos + n], dtype=np.float64).reshape(self.entries[k].shape).copy()
            pos += n
        if pos != len(flat):
            raise ShapeError("flat vector length does not match the geometric partition")
        return out

    def dot(self, other: "ParamVector") -> float:
        return float(sum(np.vdot(v, other.entries[k]) for k, v in self.entries.items()))

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(v, v) for v in self.entries.values())))

    def axpy(self, alpha: float, other: "ParamVector") -> "ParamVector":
        """Return ``self + alpha * other``."""
        return ParamVector({k: v + alpha * other.entries[k] for k, v in self.entries.items()})

    def scale(self, alpha: float) -> "ParamVector":
        return ParamVector({k: alpha * v for k, v in self.entries.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.entries.values())


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases, identity batch norm."""
    p = ParamVector()
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            p[(i, "weight")] = rng.uniform(-bound, bound, size=(layer.out_dim, layer.in_dim))
            if layer.has_bias:
                p[(i, "bias")] = np.zeros(layer.out_dim)
        elif layer.kind == "batchnorm":
            p[(i, "bn_gamma")] = np.ones(layer.out_dim)
            p[(i, "bn_beta")] = np.zeros(layer.out_dim)
            p[(i, "bn_running_mean")] = np.zeros(layer.out_dim)
            p[(i, "bn_running_var")] = np.ones(layer.out_dim)
            p[(i, "bn_eps")] = np.full(1, BN_EPS)
    return p


# --------------------------------------------------------------------------
# activations


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "silu":
        return x * _sigmoid(x)
    if kind == "gelu":
        return x * _sigmoid(GELU_SCALE * x)
    if kind == "mish":
        return x * np.tanh(np.logaddexp(0.0, x))
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def _activate_grad(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "silu":
        s = _sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    if kind == "gelu":
        s = _sigmoid(GELU_SCALE * x)
        return s + GELU_SCALE * x * s * (1.0 - s)
    if kind == "mish":
        t = np.tanh(np.logaddexp(0.0, x))
        return t + x * (1.0 - t * t) * _sigmoid(x)
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_eval(kind: str, x: float) -> float:
    """Scalar activation value; GeLU is the sigmoid form ``x * sigmoid(1.702 x)``."""
    return float(_activate(kind, np.array([x], dtype=np.float64))[0])


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    inputs: np.ndarray
    acts: list[np.ndarray]  # input to each layer
    extra: list[tuple | None]  # per-layer saved tensors for backward
    mode: str


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def forward(
    spec: NetworkSpec,
    params: ParamVector,
    x: np.ndarray,
    mode: str = "eval",
    update_stats: bool = False,
    return_cache: bool = False,
):
    """Compute logits of shape ``(batch, num_classes)``.

    ``mode="train"`` normalizes batch norm with batch statistics; with
    ``update_stats`` the running statistics in ``params`` are updated in
    place (momentum 0.1, unbiased variance).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected input dim {spec.input_dim}, got {x.shape[1]}")
    h = x
    if spec.input_mean is not None:
        h = (h - np.asarray(spec.input_mean)) / np.asarray(spec.input_std)
    acts: list[np.ndarray] = []
    extra: list[tuple | None] = []
    for i, layer in enumerate(spec.layers):
        acts.append(h)
        if layer.kind == "dense":
            h = h @ params[(i, "weight")].T
            if layer.has_bias:
                h = h + params[(i, "bias")]
            extra.append(None)
        elif layer.kind == "batchnorm":
            gamma = params[(i, "bn_gamma")]
            beta = params[(i, "bn_beta")]
            eps = params[(i, "bn_eps")][0]
            if mode == "train":
                n = h.shape[0]
                if n < 2:
                    raise ShapeError("train-mode batch norm needs at least 2 examples")
                mu = h.mean(axis=0)
                centered = h - mu
                var = (centered * centered).mean(axis=0)
                if update_stats:
                    rm = params[(i, "bn_running_mean")]
                    rv = params[(i, "bn_running_var")]
                    rm *= 1.0 - BN_MOMENTUM
                    rm += BN_MOMENTUM * mu
                    rv *= 1.0 - BN_MOMENTUM
                    rv += BN_MOMENTUM * var * (n / (n - 1))
            else:
                mu = params[(i, "bn_running_mean")]
                var = params[(i, "bn_running_var")]
                centered = h - mu
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = centered * inv_std
            h = gamma * xhat + beta
            extra.append((xhat, inv_std))
        elif layer.kind == "activation":
            h = _activate(layer.activation, h)
            extra.append(None)
        else:  # flatten
            h = h.reshape(h.shape[0], -1)
            extra.append(None)
    _check_finite(h, "logits")
    if return_cache:
        return h, ForwardCache(x, acts, extra, mode)
    return h


def backward(
    spec: NetworkSpec,
    params: ParamVector,
    cache: ForwardCache,
    dlogits: np.ndarray,
    want_params: bool = True,
    want_inputs: bool = False,
):
    """Reverse-mode pass from ``dL/dlogits``.

    Returns ``(grad_params, grad_inputs)``; either may be ``None`` when not
    requested.  Gradients of batch-norm running statistics and epsilon are
    zero (they are buffers, not functions of the loss).
    """
    grads = params.zeros_like() if want_params else None
    g = dlogits
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        a = cache.acts[i]
        if layer.kind == "dense":
            W = params[(i, "weight")]
            if want_params:
                grads[(i, "weight")] = g.T @ a
                if layer.has_bias:
                    grads[(i, "bias")] = g.sum(axis=0)
            if i > 0 or want_inputs:
                g = g @ W
        elif layer.kind == "batchnorm":
            xhat, inv_std = cache.extra[i]
            gamma = params[(i, "bn_gamma")]
            if want_params:
                grads[(i, "bn_gamma")] = (g * xhat).sum(axis=0)
                grads[(i, "bn_beta")] = g.sum(axis=0)
            dxhat = g * gamma
            if cache.mode == "train":
                n = g.shape[0]
                g = (inv_std / n) * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                g = dxhat * inv_std
        elif layer.kind == "activation":
            g = g * _activate_grad(layer.activation, a)
        else:
            g = g.reshape(a.shape)
    grad_x = None
    if want_inputs:
        if spec.input_mean is not None:
            g = g / np.asarray(spec.input_std)
        grad_x = g.reshape(cache.inputs.shape)
        _check_finite(grad_x, "input gradient")
    if want_params:
        for k, v in grads.items():
            _check_finite(v, f"gradient of {k}")
    return grads, grad_x


# --------------------------------------------------------------------------
# losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean and per-example ``-log softmax(logits)[y]`` (log-sum-exp stabilized)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    per = -log_softmax(logits)[np.arange(len(labels)), labels]
    return float(per.mean()), per


def soft_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    per = -(targets * log_softmax(logits)).sum(axis=1)
    return float(per.mean()), per


def one_hot(labels, k: int) -> np.ndarray:
    labels = _check_labels(labels, k)
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss_and_grads(
    spec: NetworkSpec,
    params: ParamVector,
    x: np.ndarray,
    labels=None,
    *,
    targets: np.ndarray | None = None,
    mode: str = "eval",
    update_stats: bool = False,
    want_params: bool = True,
    want_inputs: bool = False,
    reduction: str = "mean",
):
    """Cross-entropy against hard ``labels`` or soft ``targets`` plus gradients.

    Returns ``(mean_loss, per_example, grad_params, grad_inputs, logits)``.
    ``reduction="sum"`` differentiates the summed loss instead of the mean.
    """
    logits, cache = forward(spec, params, x, mode=mode, update_stats=update_stats, return_cache=True)
    if targets is None:
        targets = one_hot(labels, logits.shape[1])
    mean, per = soft_cross_entropy(logits, targets)
    dlogits = softmax(logits) - targets
    if reduction == "mean":
        dlogits = dlogits / logits.shape[0]
    gp, gx = backward(spec, params, cache, dlogits, want_params=want_params, want_inputs=want_inputs)
    return mean, per, gp, gx, logits


def grad_params(spec, params, x, labels, mode: str = "eval") -> tuple[float, ParamVector]:
    """Mean cross-entropy and its exact gradient with respect to every parameter entry."""
    mean, _, gp, _, _ = loss_and_grads(spec, params, x, labels, mode=mode)
    return mean, gp


def grad_inputs(spec, params, x, labels, mode: str = "eval") -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the inputs."""
    mean, _, _, gx, _ = loss_and_grads(spec, params, x, labels, mode=mode, want_params=False, want_inputs=True)
    return mean, gx


def predict(spec, params, x, mode: str = "eval") -> np.ndarray:
    # np.argmax breaks ties toward the lowest class index
    return np.argmax(forward(spec, params, x, mode=mode), axis=1)


def iter_batches(n: int, batch_size: int) -> Iterable[np.ndarray]:
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))
