"""Seeded synthetic dense-prediction scenes with a shifted target domain.

Each image is a guillotine partition of the pixel grid into one rectangle
per class, with areas drawn around the class proportions, so rare classes
sit inside the context of frequent ones. Pixel features are Gaussian
around a per-class mean; the target domain adds a mean shift and scales
the noise.

Dataset container (little-endian)::

    magic        4 bytes  b"GBWD"
    version      uint32   1
    domain       uint32   0 = source, 1 = target
    n_images     uint32
    H, W, F, C   uint32
    has_labels   uint32
    spec_len     uint32   length of the UTF-8 JSON spec that follows
    spec         spec_len bytes
    then per image: labels int64 (H, W) if has_labels, features float64 (H, W, F)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .seeding import stream

DOMAINS = ("source", "target")
DEFAULT_PROPORTIONS = (0.40, 0.25, 0.15, 0.10, 0.07, 0.03)

DATASET_MAGIC = b"GBWD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIIII")


@dataclass(frozen=True)
class SceneSpec:
    """Generative description of a synthetic segmentation task.

    ``class_means`` and ``target_mean_shift`` are drawn from
    ``geometry_seed`` when left as None, scaled by ``mean_separation`` and
    ``shift_magnitude``; the values in use are exposed as ``means``,
    ``scales`` and ``shift``. ``seed`` only drives the image draws, so changing it
    replicates the same task.
    ``concentration`` controls how much per-image class areas scatter
    around ``proportions`` (Dirichlet concentration).
    """

    proportions: tuple = DEFAULT_PROPORTIONS
    height: int = 64
    width: int = 64
    n_features: int = 8
    class_means: tuple | None = None
    class_scales: tuple | None = None
    target_mean_shift: tuple | None = None
    target_scale: float = 1.0
    concentration: float = 30.0
    mean_separation: float = 1.0
    shift_magnitude: float = 1.0
    geometry_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.proportions, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise InvalidInputError("proportions: need at least two classes")
        if np.any(~np.isfinite(p)) or np.any(p <= 0):
            raise InvalidInputError("proportions: every entry must be positive")
        if abs(p.sum() - 1.0) > 1e-9:
            raise InvalidInputError(f"proportions: must sum to 1, got {p.sum():.12g}")
        if self.height < 1 or self.width < 1 or self.n_features < 1:
            raise InvalidInputError("height, width and n_features must be positive")
        if p.min() * self.height * self.width < 1:
            raise InvalidInputError(
                f"proportions: smallest class covers under one pixel of a "
                f"{self.height}x{self.width} grid")
        if not self.concentration > 0:
            raise InvalidInputError("concentration: must be positive")
        if not self.target_scale > 0:
            raise InvalidInputError("target_scale: must be positive")
        c, f = p.size, self.n_features
        rng = stream(self.geometry_seed, "scene")
        means = self.class_means
        if means is None:
            means = self.mean_separation * rng.standard_normal((c, f))
        means = np.asarray(means, dtype=np.float64)
        if means.shape != (c, f):
            raise InvalidInputError(f"class_means: expected shape ({c}, {f})")
        scales = np.ones(c) if self.class_scales is None else np.asarray(self.class_scales, float)
        if scales.shape != (c,) or np.any(scales <= 0):
            raise InvalidInputError("class_scales: need one positive scale per class")
        shift = self.target_mean_shift
        if shift is None:
            direction = rng.standard_normal(f)
            shift = self.shift_magnitude * direction / np.linalg.norm(direction)
        shift = np.asarray(shift, dtype=np.float64)
        if shift.shape != (f,):
            raise InvalidInputError(f"target_mean_shift: expected {f} entries")
        object.__setattr__(self, "proportions", tuple(p.tolist()))
        if self.class_means is not None:
            object.__setattr__(self, "class_means", tuple(map(tuple, means.tolist())))
        if self.class_scales is not None:
            object.__setattr__(self, "class_scales", tuple(scales.tolist()))
        if self.target_mean_shift is not None:
            object.__setattr__(self, "target_mean_shift", tuple(shift.tolist()))
        # resolved values live outside the fields so dataclasses.replace re-derives them
        for name, arr in (("means", means), ("scales", scales), ("shift", shift)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_classes(self) -> int:
        return len(self.proportions)

    def to_dict(self) -> dict:
        return {
            "proportions": list(self.proportions),
            "height": self.height,
            "width": self.width,
            "n_features": self.n_features,
            "class_means": None if self.class_means is None else [list(m) for m in self.class_means],
            "class_scales": None if self.class_scales is None else list(self.class_scales),
            "target_mean_shift": (None if self.target_mean_shift is None
                                  else list(self.target_mean_shift)),
            "target_scale": self.target_scale,
            "concentration": self.concentration,
            "mean_separation": self.mean_separation,
            "shift_magnitude": self.shift_magnitude,
            "geometry_seed": self.geometry_seed,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("proportions", "class_scales", "target_mean_shift"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("class_means") is not None:
            d["class_means"] = tuple(map(tuple, d["class_means"]))
        return cls(**d)


@dataclass
class DenseSample:
    features: np.ndarray
    labels: np.ndarray | None
    domain: str = "source"

    def without_labels(self) -> "DenseSample":
        return DenseSample(self.features, None, self.domain)


@dataclass(frozen=True)
class ClassStatistics:
    pixel_freq: np.ndarray
    image_freq: np.ndarray
    pixel_count: np.ndarray = field(default=None)
    n_images: int = 0


def _split_rect(rng, rect, classes, areas, out):
    r0, c0, r1, c1 = rect
    if len(classes) == 1:
        out[r0:r1, c0:c1] = classes[0]
        return
    order = rng.permutation(len(classes))
    classes = [classes[i] for i in order]
    areas = areas[order]
    cum = np.cumsum(areas)
    k = int(np.argmin(np.abs(cum[:-1] - cum[-1] / 2.0))) + 1
    frac = cum[k - 1] / cum[-1] if cum[-1] > 0 else 0.5
    h, w = r1 - r0, c1 - c0
    if h >= w:
        cut = r0 + int(round(frac * h))
        first, second = (r0, c0, cut, c1), (cut, c0, r1, c1)
    else:
        cut = c0 + int(round(frac * w))
        first, second = (r0, c0, r1, cut), (r0, cut, r1, c1)
    _split_rect(rng, first, classes[:k], areas[:k], out)
    _split_rect(rng, second, classes[k:], areas[k:], out)


def _layout(rng, spec):
    q = rng.dirichlet(spec.concentration * np.asarray(spec.proportions))
    labels = np.empty((spec.height, spec.width), dtype=np.int64)
    _split_rect(rng, (0, 0, spec.height, spec.width), list(range(spec.n_classes)),
                q * spec.height * spec.width, labels)
    return labels


def generate_image(spec: SceneSpec, index: int, domain: str = "source") -> DenseSample:
    """Image ``index`` of ``domain``; a pure function of its arguments."""
    if domain not in DOMAINS:
        raise InvalidInputError(f"domain must be one of {DOMAINS}")
    rng = stream(spec.seed, f"data/{domain}/{index}")
    labels = _layout(rng, spec)
    means = spec.means
    scales = spec.scales
    noise = rng.standard_normal((spec.height, spec.width, spec.n_features))
    sigma = scales[labels][..., None]
    if domain == "target":
        feats = means[labels] + spec.shift + spec.target_scale * sigma * noise
    else:
        feats = means[labels] + sigma * noise
    return DenseSample(feats, labels, domain)


def generate(spec: SceneSpec, n_images: int, domain: str = "source") -> list:
    if n_images < 1:
        raise InvalidInputError("n_images must be at least 1")
    return [generate_image(spec, i, domain) for i in range(n_images)]


def dataset_class_statistics(samples, n_classes: int | None = None) -> ClassStatistics:
    """Pixel and image frequencies per class over labelled samples."""
    if not samples:
        raise InvalidInputError("empty dataset")
    if any(s.labels is None for s in samples):
        raise InvalidInputError("class statistics need labelled samples")
    if n_classes is None:
        n_classes = int(max(s.labels.max() for s in samples)) + 1
    pixels = np.zeros(n_classes, dtype=np.int64)
    images = np.zeros(n_classes, dtype=np.int64)
    for s in samples:
        lab = s.labels[s.labels >= 0]
        counts = np.bincount(lab.ravel(), minlength=n_classes)
        pixels += counts
        images += counts > 0
    return ClassStatistics(pixels / pixels.sum(), images / len(samples), pixels, len(samples))


def spec_json(spec: SceneSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)


def dataset_to_bytes(spec: SceneSpec, samples, domain: str) -> bytes:
    if domain not in DOMAINS:
        raise InvalidInputError(f"domain must be one of {DOMAINS}")
    has_labels = all(s.labels is not None for s in samples)
    spec_bytes = spec_json(spec).encode("utf-8")
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, DOMAINS.index(domain), len(samples),
                          spec.height, spec.width, spec.n_features, spec.n_classes,
                          int(has_labels), len(spec_bytes)), spec_bytes]
    for s in samples:
        if has_labels:
            parts.append(np.ascontiguousarray(s.labels, dtype="<i8").tobytes())
        parts.append(np.ascontiguousarray(s.features, dtype="<f8").tobytes())
    return b"".join(parts)


def dataset_from_bytes(data: bytes):
    """Inverse of :func:`dataset_to_bytes`; returns ``(spec, samples, domain)``."""
    if len(data) < _HEADER.size:
        raise InvalidInputError("truncated dataset container")
    magic, version, dom, n, h, w, f, c, has_labels, spec_len = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise InvalidInputError("not a dataset container")
    offset = _HEADER.size
    spec = SceneSpec.from_dict(json.loads(data[offset:offset + spec_len].decode("utf-8")))
    offset += spec_len
    domain = DOMAINS[dom]
    samples = []
    for _ in range(n):
        labels = None
        if has_labels:
            labels = np.frombuffer(data, "<i8", h * w, offset).reshape(h, w).copy()
            offset += h * w * 8
        feats = np.frombuffer(data, "<f8", h * w * f, offset).reshape(h, w, f).copy()
        offset += h * w * f * 8
        samples.append(DenseSample(feats, labels, domain))
    if offset != len(data):
        raise InvalidInputError("trailing bytes in dataset container")
    return spec, samples, domain


def save_dataset(path, spec: SceneSpec, samples, domain: str):
    """Write the binary container at ``path`` and a JSON sidecar next to it."""
    path = Path(path)
    path.write_bytes(dataset_to_bytes(spec, samples, domain))
    sidecar = {"format": "GBWD", "version": DATASET_VERSION, "domain": domain,
               "n_images": len(samples), "spec": spec.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_dataset(path):
    return dataset_from_bytes(Path(path).read_bytes())
