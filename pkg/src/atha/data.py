"""Synthetic two-domain data, N-way K-shot episodes and the .athd container.

Classes are procedural patterns (oriented gratings, ring radii, blob
counts) drawn with random colours, jitter and pixel noise. The target
domain reuses the source content image-for-image and passes it through a
style transform (channel remap, low-pass filter, contrast/brightness
shift) whose strength is the shift knob in [0, 1]. Pairing by index is
what lets CKA compare the two domains sample-by-sample.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, SamplingError

MAGIC = b"ATHD"
VERSION = 1
_HEADER = struct.Struct("<4sHB")


# --------------------------------------------------------------------------
# tensor container


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype="<f8")
    header = _HEADER.pack(MAGIC, VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError("truncated magic", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, rank = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    dims_end = _HEADER.size + 4 * rank
    if len(buf) < dims_end:
        raise FormatError("truncated dimensions", len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, _HEADER.size)
    expected = dims_end + 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes", len(buf))
    if len(buf) > expected:
        raise FormatError("trailing bytes after payload", expected)
    return np.frombuffer(buf, dtype="<f8", offset=dims_end).reshape(shape).astype(np.float64)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --------------------------------------------------------------------------
# domain spec and generation


def default_classes() -> list[dict]:
    # every class must survive a horizontal flip (used as augmentation)
    classes = [{"kind": "grating", "orientation": a, "frequency": f}
               for a in (0, 90) for f in (2.0, 4.0)]
    classes += [{"kind": "ring", "radius": r} for r in (4.0, 7.0, 10.0, 13.0)]
    classes += [{"kind": "blobs", "count": c} for c in (1, 2, 3, 4)]
    return classes


@dataclass
class DomainSpec:
    classes: list = field(default_factory=default_classes)
    images_per_class: int = 100
    image_size: int = 32
    shift: float = 0.8
    noise: float = 0.08

    def __post_init__(self):
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigError(f"shift must lie in [0, 1], got {self.shift}")
        if not self.classes:
            raise ConfigError("a domain spec needs at least one class")
        for c in self.classes:
            if c.get("kind") not in ("grating", "ring", "blobs"):
                raise ConfigError(f"unknown class kind in {c}")

    @classmethod
    def from_json(cls, path) -> "DomainSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"classes": self.classes, "images_per_class": self.images_per_class,
                "image_size": self.image_size, "shift": self.shift, "noise": self.noise}


@dataclass
class Dataset:
    images: np.ndarray  # (M, 3, H, W)
    labels: np.ndarray  # class ids into the text bank
    class_names: list
    domain_tag: str
    shift: float = 0.0
    seed: int = 0

    def __len__(self):
        return len(self.labels)

    def indices_of(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.class_names, self.domain_tag,
                       self.shift, self.seed)


def _pattern(cls: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    # geometry is given for a 32-pixel canvas and scaled to ``size``
    k = size / 32
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    kind = cls["kind"]
    if kind == "grating":
        theta = np.deg2rad(cls["orientation"] + rng.uniform(-6, 6))
        freq = cls.get("frequency", 3.0) * rng.uniform(0.9, 1.1)
        phase = rng.uniform(0, 2 * np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * u / size + phase)
    if kind == "ring":
        cy, cx = size / 2 + rng.uniform(-3, 3, size=2) * k
        r = np.hypot(yy - cy, xx - cx)
        radius = cls["radius"] * k * rng.uniform(0.92, 1.08)
        return np.exp(-((r - radius) ** 2) / (2 * (1.2 * k) ** 2))
    out = np.zeros((size, size))
    centers: list = []
    tries = 0
    while len(centers) < cls["count"]:
        tries += 1
        if tries > 10_000:
            raise ConfigError(f"cannot place {cls['count']} separated blobs on a {size}-pixel canvas")
        c = rng.uniform(5 * k, size - 5 * k, size=2)
        if all(np.hypot(*(c - p)) > 8 * k for p in centers):
            centers.append(c)
    for cy, cx in centers:
        out = np.maximum(out, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (2.0 * k) ** 2)))
    return out


def render(cls: dict, size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) image of the given class."""
    fg = rng.uniform(0.4, 1.0, size=3)
    bg = rng.uniform(0.0, 0.35, size=3)
    p = _pattern(cls, size, rng)
    img = bg[:, None, None] * (1 - p) + fg[:, None, None] * p
    return img + rng.normal(0.0, noise, size=img.shape)


_CHANNEL_MIX = np.array([[0.1, 0.6, 0.3],
                         [0.3, 0.1, 0.6],
                         [0.6, 0.3, 0.1]])


def domain_transform(img: np.ndarray, shift: float) -> np.ndarray:
    """Style shift of strength ``shift``; exactly the identity at 0."""
    if shift == 0.0:
        return img.copy()
    c, h, w = img.shape
    mix = (1 - shift) * np.eye(3) + shift * _CHANNEL_MIX
    out = np.einsum("ij,jhw->ihw", mix, img)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    gain = np.exp(-shift * (fy ** 2 + fx ** 2) / (2 * 0.12 ** 2))
    out = np.real(np.fft.ifft2(np.fft.fft2(out) * gain))
    mean = out.mean(axis=(1, 2), keepdims=True)
    return mean + (1 - 0.6 * shift) * (out - mean) + 0.3 * shift


def gen_synthetic_domains(spec: DomainSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Source and target datasets, paired image-for-image."""
    if not 0.0 <= spec.shift <= 1.0:
        raise ConfigError(f"shift must lie in [0, 1], got {spec.shift}")
    rng = np.random.default_rng(seed)
    n_cls = len(spec.classes)
    labels = np.repeat(np.arange(n_cls), spec.images_per_class)
    images = np.stack([render(spec.classes[c], spec.image_size, spec.noise, rng) for c in labels])
    target = np.stack([domain_transform(im, spec.shift) for im in images])
    names = list(range(n_cls))
    return (Dataset(images, labels.copy(), names, "source", 0.0, seed),
            Dataset(target, labels.copy(), names, "target", spec.shift, seed))


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    files = []
    for i, img in enumerate(ds.images):
        name = f"images/{i:06d}.athd"
        write_tensor(root / name, img)
        files.append(name)
    counts = {str(c): int((ds.labels == c).sum()) for c in ds.class_names}
    manifest = {"format": "athd-dataset", "version": VERSION, "domain": ds.domain_tag,
                "shift": ds.shift, "seed": ds.seed, "classes": ds.class_names,
                "counts": counts, "labels": ds.labels.tolist(), "files": files}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    images = np.stack([read_tensor(root / f) for f in manifest["files"]])
    return Dataset(images, np.asarray(manifest["labels"], dtype=np.int64), manifest["classes"],
                   manifest["domain"], manifest["shift"], manifest["seed"])


# --------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray  # local labels in [0, N)
    query_images: np.ndarray
    query_labels: np.ndarray
    class_ids: list  # text-bank ids of the N classes, in local-label order
    seed: int
    support_index: np.ndarray  # dataset rows, for audit
    query_index: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.class_ids)


def sample_episode(ds: Dataset, n_way: int, k_shot: int, m_query: int, seed: int) -> Episode:
    """Uniform without-replacement N-way K-shot episode with M queries per class."""
    classes = np.unique(ds.labels)
    if len(classes) < n_way:
        raise SamplingError(f"dataset has {len(classes)} classes, episode needs {n_way}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(classes, size=n_way, replace=False)
    sup, qry, sup_y, qry_y = [], [], [], []
    for local, cls in enumerate(chosen):
        pool = ds.indices_of(cls)
        if len(pool) < k_shot + m_query:
            raise SamplingError(f"class {int(cls)} has {len(pool)} images, "
                                f"episode needs {k_shot + m_query}")
        picked = rng.permutation(pool)[: k_shot + m_query]
        sup.append(picked[:k_shot])
        qry.append(picked[k_shot:])
        sup_y += [local] * k_shot
        qry_y += [local] * m_query
    sup_idx, qry_idx = np.concatenate(sup), np.concatenate(qry)
    return Episode(ds.images[sup_idx], np.array(sup_y), ds.images[qry_idx], np.array(qry_y),
                   [int(c) for c in chosen], seed, sup_idx, qry_idx)


def episode_seed(base_seed: int, index: int) -> int:
    """Per-episode seed derived from the run seed and episode index only."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def augment(images: np.ndarray, rng: np.random.Generator, padding: int = 4) -> np.ndarray:
    """Random crop after zero padding plus random horizontal flip."""
    b, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * padding + 1, size=(b, 2))
    flips = rng.random(b) < 0.5
    for i in range(b):
        y, x = offs[i]
        crop = padded[i, :, y:y + h, x:x + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
