"""A per-pixel classifier with hand-written backpropagation and plain SGD.

The network is ``F -> H -> C`` with a ReLU hidden layer, or ``F -> C`` when
``hidden == 0``. Its outputs are raw logits.

Checkpoint layout (all little-endian)::

    magic    4 bytes   b"GBWM"
    version  uint32    1
    F, H, C  uint32    feature, hidden (0 = linear) and class counts
    seed     int64     initialization seed
    then float64 row-major arrays: W1 (F, H), b1 (H), W2 (H, C), b2 (C)
    for the hidden model, or W (F, C), b (C) for the linear one.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .losses import IGNORE, softmax
from .seeding import stream

CHECKPOINT_MAGIC = b"GBWM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIq")


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    steps: int = 100
    batch_size: int = 256

    def __post_init__(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be at least 1")
        if self.steps < 0:
            raise InvalidInputError("steps must be non-negative")


class MicroModel:
    def __init__(self, n_features: int, n_classes: int, hidden: int = 0, seed: int = 0):
        if n_features < 1 or n_classes < 1 or hidden < 0:
            raise InvalidInputError("model dimensions must be positive")
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.hidden = int(hidden)
        self.seed = int(seed)
        rng = stream(seed, "init")
        dims = [self.n_features] + ([self.hidden] if self.hidden else []) + [self.n_classes]
        self.params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "MicroModel":
        other = object.__new__(MicroModel)
        other.__dict__.update(self.__dict__)
        other.params = [p.copy() for p in self.params]
        return other

    def _check_features(self, features):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim < 1 or x.shape[-1] != self.n_features:
            raise InvalidInputError(
                f"expected features with last dimension {self.n_features}, got {x.shape}")
        return x

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.n_features, self.hidden,
                            self.n_classes, self.seed)
        return head + b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MicroModel":
        if len(data) < _HEADER.size:
            raise InvalidInputError("truncated checkpoint")
        magic, version, f, h, c, seed = _HEADER.unpack_from(data)
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            raise InvalidInputError("not a model checkpoint")
        model = cls(f, c, h, seed)
        offset = _HEADER.size
        for i, p in enumerate(model.params):
            nbytes = p.size * 8
            if offset + nbytes > len(data):
                raise InvalidInputError("truncated checkpoint")
            model.params[i] = np.frombuffer(data, "<f8", p.size, offset).reshape(p.shape).copy()
            offset += nbytes
        if offset != len(data):
            raise InvalidInputError("trailing bytes in checkpoint")
        return model

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MicroModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _forward_cache(model, x):
    flat = x.reshape(-1, model.n_features)
    if model.hidden:
        w1, b1, w2, b2 = model.params
        pre = flat @ w1 + b1
        act = np.maximum(pre, 0.0)
        return pre, act, act @ w2 + b2
    w, b = model.params
    return None, flat, flat @ w + b


def forward(model: MicroModel, features) -> np.ndarray:
    """Logits of shape ``features.shape[:-1] + (C,)``."""
    x = model._check_features(features)
    _, _, out = _forward_cache(model, x)
    return out.reshape(x.shape[:-1] + (model.n_classes,))


def parameter_gradients(model: MicroModel, features, upstream) -> list:
    """Backpropagate ``upstream = dL/dlogits`` to every parameter array."""
    x = model._check_features(features)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != x.shape[:-1] + (model.n_classes,):
        raise InvalidInputError(f"upstream shape {up.shape} does not match the logits")
    if not np.all(np.isfinite(up)):
        raise InvalidInputError("upstream gradient must be finite")
    up = up.reshape(-1, model.n_classes)
    pre, act, _ = _forward_cache(model, x)
    if not model.hidden:
        return [act.T @ up, up.sum(axis=0)]
    w2 = model.params[2]
    d_act = (up @ w2.T) * (pre > 0)
    flat = x.reshape(-1, model.n_features)
    return [flat.T @ d_act, d_act.sum(axis=0), act.T @ up, up.sum(axis=0)]


def backward_and_step(model: MicroModel, features, upstream, config: SgdConfig) -> MicroModel:
    """One SGD update ``theta <- theta - lr * dL/dtheta``, in place."""
    grads = parameter_gradients(model, features, upstream)
    for p, g in zip(model.params, grads):
        p -= config.learning_rate * g
    return model


def pseudo_label(model: MicroModel, features, threshold: float = 0.5):
    """Argmax labels and max-probability confidences.

    Pixels whose confidence falls below ``threshold`` are marked IGNORE.
    """
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInputError("threshold must lie in [0, 1]")
    probs = softmax(forward(model, features))
    labels = probs.argmax(axis=-1).astype(np.int64)
    conf = probs.max(axis=-1)
    labels[conf < threshold] = IGNORE
    return labels, conf
