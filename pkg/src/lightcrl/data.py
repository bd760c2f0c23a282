"""Paired embedding sets: the LCE1 file format, synthetic generation, batching.

The frozen per-modality encoders live upstream of this package; what arrives
here is their output, one row per sample and modality, with row ``i`` of both
matrices forming a true pair.

LCE1 layout (little-endian)::

    magic "LCE1" | u32 version=1 | u32 n | u32 d1 | u32 d2
    u8 has_labels | u8 split_tag (0 train, 1 val, 2 test) | 2 zero bytes
    n*d1 float32 | n*d2 float32 | [n u32 labels]
"""

import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, CorruptionError, DataError, FormatError
from .rng import STREAM_DATA, make_rng, standard_normal

MAGIC = b"LCE1"
VERSION = 1
SPLIT_TAGS = ("train", "val", "test")
_HEADER = struct.Struct("<4sIIIIBB2x")


@dataclass
class PairedEmbeddingSet:
    m1: np.ndarray
    m2: np.ndarray
    labels: np.ndarray | None = None
    split_tag: str = "train"

    def __post_init__(self):
        self.m1 = np.ascontiguousarray(self.m1, dtype=np.float32)
        self.m2 = np.ascontiguousarray(self.m2, dtype=np.float32)
        if self.m1.ndim != 2 or self.m2.ndim != 2:
            raise ContractError("m1 and m2 must be matrices")
        if self.m1.shape[0] != self.m2.shape[0]:
            raise ContractError(f"row count mismatch: m1 has {self.m1.shape[0]}, m2 has {self.m2.shape[0]}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ContractError(f"labels must have {self.n} entries, got shape {self.labels.shape}")
            if self.labels.size and self.labels.min() < 0:
                raise DataError("labels must be nonnegative")
        if self.split_tag not in SPLIT_TAGS:
            raise ContractError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")

    @property
    def n(self):
        return self.m1.shape[0]

    @property
    def d1(self):
        return self.m1.shape[1]

    @property
    def d2(self):
        return self.m2.shape[1]

    @property
    def num_classes(self):
        return 0 if self.labels is None or self.labels.size == 0 else int(self.labels.max()) + 1

    def subset(self, indices, split_tag=None):
        indices = np.asarray(indices, dtype=np.int64)
        return PairedEmbeddingSet(
            self.m1[indices],
            self.m2[indices],
            None if self.labels is None else self.labels[indices],
            split_tag or self.split_tag,
        )


# ---------------------------------------------------------------- file format


def save_embeddings(data, path):
    has_labels = data.labels is not None
    if has_labels and data.labels.size and data.labels.max() > 0xFFFFFFFF:
        raise DataError("label does not fit in u32")
    header = _HEADER.pack(MAGIC, VERSION, data.n, data.d1, data.d2, int(has_labels), SPLIT_TAGS.index(data.split_tag))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.m1.astype("<f4").tobytes())
        fh.write(data.m2.astype("<f4").tobytes())
        if has_labels:
            fh.write(data.labels.astype("<u4").tobytes())


def load_embeddings(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise FormatError(f"{path}: bad magic {raw[:4]!r}")
        raise CorruptionError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, d1, d2, has_labels, split = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if split >= len(SPLIT_TAGS) or has_labels > 1:
        raise FormatError(f"{path}: bad header flags (has_labels={has_labels}, split={split})")
    expected = _HEADER.size + 4 * n * (d1 + d2) + (4 * n if has_labels else 0)
    if len(raw) != expected:
        raise CorruptionError(f"{path}: payload is {len(raw)} bytes, header implies {expected}")
    off = _HEADER.size
    m1 = np.frombuffer(raw, dtype="<f4", count=n * d1, offset=off).reshape(n, d1)
    off += 4 * n * d1
    m2 = np.frombuffer(raw, dtype="<f4", count=n * d2, offset=off).reshape(n, d2)
    off += 4 * n * d2
    for name, block in (("m1", m1), ("m2", m2)):
        bad = ~np.isfinite(block)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise DataError(f"{path}: non-finite value in {name} at row {row}", row=row)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64) if has_labels else None
    return PairedEmbeddingSet(m1.astype(np.float32), m2.astype(np.float32), labels, SPLIT_TAGS[split])


def jsonl_to_set(lines, split_tag="train"):
    """Build a set from JSON lines ``{"m1": [...], "m2": [...], "label": int?}``.

    Labels must be present on every line or on none.
    """
    m1, m2, labels = [], [], []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        try:
            m1.append(rec["m1"])
            m2.append(rec["m2"])
        except KeyError as exc:
            raise DataError(f"line {lineno}: missing field {exc.args[0]}", row=lineno - 1) from None
        labels.append(rec.get("label"))
    if not m1:
        raise DataError("no records")
    have = [lab is not None for lab in labels]
    if any(have) and not all(have):
        raise DataError("label present on some lines but not all")
    a1, a2 = np.asarray(m1, dtype=np.float64), np.asarray(m2, dtype=np.float64)
    for name, block in (("m1", a1), ("m2", a2)):
        bad = ~np.isfinite(block)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise DataError(f"non-finite value in {name} at row {row}", row=row)
    return PairedEmbeddingSet(a1, a2, np.asarray(labels) if all(have) else None, split_tag)


def convert_jsonl(src, dst, split_tag="train"):
    with open(src) as fh:
        data = jsonl_to_set(fh, split_tag)
    save_embeddings(data, dst)
    return data


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the seeded paired generator.

    ``class_sep`` scales the class means relative to the unit within-class
    latent noise; it is what makes the classes (nearly) linearly separable.
    """

    n: int
    d_latent: int
    d1: int
    d2: int
    noise_sigma: float = 0.1
    num_classes: int = 10
    seed: int = 0
    class_sep: float = 4.0

    def validate(self):
        for name in ("n", "d_latent", "d1", "d2", "num_classes"):
            if int(getattr(self, name)) <= 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be nonnegative")
        if self.d_latent > min(self.d1, self.d2):
            warnings.warn("d_latent exceeds an embedding width; the maps cannot be injective", stacklevel=3)


@dataclass
class SyntheticWorld:
    """The fixed random structure behind one seed: mixing maps and class means."""

    a1: np.ndarray
    a2: np.ndarray
    class_means: np.ndarray
    latents: np.ndarray = field(default=None, repr=False)


def _draw_world(spec):
    spec.validate()
    rng = make_rng(spec.seed, STREAM_DATA)
    a1 = standard_normal(rng, (spec.d1, spec.d_latent)) / np.sqrt(spec.d_latent)
    a2 = standard_normal(rng, (spec.d2, spec.d_latent)) / np.sqrt(spec.d_latent)
    means = spec.class_sep * standard_normal(rng, (spec.num_classes, spec.d_latent))
    return rng, SyntheticWorld(a1, a2, means)


def generate_synthetic(spec, split_tag="train", return_world=False):
    """Draw ``spec.n`` labelled pairs ``(A1 z + s e, A2 z + s e')``.

    ``z = mu[label] + N(0, I)``; labels cycle ``0, 1, ..., C-1, 0, ...``.
    Rows are computed in float64 and stored as float32.
    """
    rng, world = _draw_world(spec)
    labels = np.arange(spec.n, dtype=np.int64) % spec.num_classes
    z = world.class_means[labels] + standard_normal(rng, (spec.n, spec.d_latent))
    e1 = standard_normal(rng, (spec.n, spec.d1))
    e2 = standard_normal(rng, (spec.n, spec.d2))
    m1 = z @ world.a1.T + spec.noise_sigma * e1
    m2 = z @ world.a2.T + spec.noise_sigma * e2
    data = PairedEmbeddingSet(m1, m2, labels, split_tag)
    if return_world:
        return data, replace(world, latents=z)
    return data


def class_prototypes(spec):
    """One noise-free pair per class: ``(A1 mu_c, A2 mu_c)``, labelled ``c``."""
    _, world = _draw_world(spec)
    mu = world.class_means
    return PairedEmbeddingSet(mu @ world.a1.T, mu @ world.a2.T, np.arange(spec.num_classes), "test")


def split_set(data, sizes, tags=("train", "test")):
    """Consecutive row blocks of the given sizes (labels stay round-robin balanced)."""
    if sum(sizes) > data.n:
        raise ContractError(f"split sizes {sizes} exceed n={data.n}")
    out, start = [], 0
    for size, tag in zip(sizes, tags):
        out.append(data.subset(np.arange(start, start + size), tag))
        start += size
    return out


def standard_synthetic(seed=7, n_train=512, n_test=128):
    """The desk-scale reference set: 10 classes, d_latent 8, d1 32, d2 48, sigma 0.1."""
    spec = SyntheticSpec(n=n_train + n_test, d_latent=8, d1=32, d2=48, noise_sigma=0.1, num_classes=10, seed=seed)
    train, test = split_set(generate_synthetic(spec), (n_train, n_test))
    return spec, train, test


# ---------------------------------------------------------------- batching


def sample_minibatch(data, k, rng):
    """``k`` distinct aligned rows drawn uniformly without replacement."""
    if not 1 <= k <= data.n:
        raise ContractError(f"batch size {k} must lie in [1, {data.n}]")
    idx = rng.permutation(data.n)[:k]
    return data.m1[idx], data.m2[idx], idx


def epoch_batches(n, k, rng):
    """Index blocks of one shuffled epoch; the last block keeps the remainder."""
    if not 1 <= k <= n:
        raise ContractError(f"batch size {k} must lie in [1, {n}]")
    perm = rng.permutation(n)
    return [perm[i : i + k] for i in range(0, n, k)]
