"""Modality embeddings, the on-disk embedding format and the synthetic triplet generator.

The generator stands in for a frozen, pre-aligned image-text encoder pair. Every
category owns a prototype on the unit sphere; image and text embeddings are noisy
copies of that prototype shifted by two opposite offsets (the modality gap), and
each point cloud is a Gaussian blob whose mean and axis scales are a fixed linear
function of the prototype.

Random draws come from numpy's PCG64 bit generator (``np.random.default_rng``) in
this order: prototypes, gap direction, mean map, scale map, image noise, text
noise, point noise.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    InvalidBatch,
    InvalidConfig,
    MRDIOError,
    NearZeroNorm,
)

NORM_EPS = 1e-12

EMBEDDING_MAGIC = b"MRDE"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIB3xQQ")

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "mrd-dataset"


class Modality(enum.IntEnum):
    POINT = 0
    IMAGE = 1
    TEXT = 2


def _unit_tolerance(dtype) -> float:
    # float32 storage cannot hold a unit row to better than a few ulps
    return 1e-9 if dtype == np.float64 else 1e-6


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit Euclidean length.

    Raises:
        NearZeroNorm: if ``||v|| <= 1e-12``.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.dot(v, v)))
    if not norm > NORM_EPS:
        raise NearZeroNorm(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def normalize_rows(m) -> np.ndarray:
    """Row-wise :func:`l2_normalize` for an ``N x D`` matrix."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(~(norms > NORM_EPS)):
        raise NearZeroNorm("matrix has a row with near-zero norm")
    return m / norms[:, None]


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    """``N x D`` matrix of unit-norm embedding rows for one modality."""

    modality: Modality
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 2:
            raise InvalidBatch(f"embedding batch must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 1 or d < 2:
            raise InvalidBatch(f"need N >= 1 and D >= 2, got {n} x {d}")
        norms = np.sqrt(np.einsum("ij,ij->i", data.astype(np.float64), data.astype(np.float64)))
        tol = _unit_tolerance(data.dtype)
        if not np.all(np.abs(norms - 1.0) <= tol):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise InvalidBatch(f"rows are not unit norm (max deviation {worst:.3g})")
        data.setflags(write=False)
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def as_float64(self) -> np.ndarray:
        """Rows promoted to float64 and renormalized to unit length."""
        return normalize_rows(self.data.astype(np.float64))

    def take(self, indices) -> "EmbeddingBatch":
        return EmbeddingBatch(self.modality, self.data[np.asarray(indices)])


@dataclass(frozen=True)
class SynthConfig:
    n_categories: int = 40
    samples_per_category: int = 50
    d: int = 32
    points_per_cloud: int = 16
    sigma_image: float = 0.1
    sigma_text: float = 0.1
    gap_magnitude: float = 0.8
    seed: int = 0
    mean_gain: float = 1.0
    scale_base: float = 1.0

    def validate(self) -> None:
        for name in ("n_categories", "samples_per_category", "points_per_cloud"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.d < 2:
            raise InvalidConfig("d must be >= 2")
        if self.sigma_image < 0 or self.sigma_text < 0:
            raise InvalidConfig("noise sigmas must be >= 0")
        if self.gap_magnitude < 0:
            raise InvalidConfig("gap_magnitude must be >= 0")
        if self.scale_base <= 0:
            raise InvalidConfig("scale_base must be > 0")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidConfig("seed must fit in an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TripletDataset:
    """Index-aligned point clouds, frozen image/text embeddings and labels."""

    clouds: np.ndarray  # N x M x 3
    image_emb: EmbeddingBatch
    text_emb: EmbeddingBatch
    labels: np.ndarray
    class_text_emb: EmbeddingBatch
    category_names: list = field(default_factory=list)
    config: SynthConfig | None = None

    def __post_init__(self):
        clouds = np.array(self.clouds, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if clouds.ndim != 3 or clouds.shape[2] != 3:
            raise InvalidConfig(f"clouds must be N x M x 3, got {clouds.shape}")
        n = clouds.shape[0]
        if not (self.image_emb.n == self.text_emb.n == n == labels.shape[0]):
            raise InvalidConfig("dataset components are not index-aligned")
        if self.image_emb.d != self.text_emb.d or self.class_text_emb.d != self.image_emb.d:
            raise DimMismatch("image, text and class prototype dims differ")
        if n and (labels.min() < 0 or labels.max() >= self.class_text_emb.n):
            raise InvalidConfig("labels must lie in [0, C)")
        names = list(self.category_names) or [f"category_{c:03d}" for c in range(self.class_text_emb.n)]
        if len(names) != self.class_text_emb.n:
            raise InvalidConfig("category_names length differs from number of prototypes")
        clouds.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "clouds", clouds)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "category_names", names)

    @property
    def n(self) -> int:
        return self.clouds.shape[0]

    @property
    def n_categories(self) -> int:
        return self.class_text_emb.n

    def subset(self, indices) -> "TripletDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TripletDataset(
            clouds=self.clouds[idx],
            image_emb=self.image_emb.take(idx),
            text_emb=self.text_emb.take(idx),
            labels=self.labels[idx],
            class_text_emb=self.class_text_emb,
            category_names=self.category_names,
            config=self.config,
        )


def gen_synthetic_triplets(cfg: SynthConfig) -> TripletDataset:
    """Generate a reproducible synthetic triplet dataset.

    Embeddings and clouds are quantized to float32 so that the in-memory dataset
    is bit-identical to what :func:`save_dataset` writes.
    """
    cfg.validate()
    C, S, D, M = cfg.n_categories, cfg.samples_per_category, cfg.d, cfg.points_per_cloud
    n = C * S
    rng = np.random.default_rng(int(cfg.seed))

    protos = normalize_rows(rng.standard_normal((C, D)))
    gap_dir = l2_normalize(rng.standard_normal(D))
    g_image = 0.5 * cfg.gap_magnitude * gap_dir
    g_text = -g_image
    mean_map = rng.standard_normal((3, D)) * cfg.mean_gain
    scale_map = rng.standard_normal((3, D))

    labels = np.repeat(np.arange(C, dtype=np.int64), S)
    z = protos[labels]
    eps_image = rng.standard_normal((n, D))
    eps_text = rng.standard_normal((n, D))
    image = normalize_rows(z + cfg.sigma_image * eps_image + g_image)
    text = normalize_rows(z + cfg.sigma_text * eps_text + g_text)
    class_text = normalize_rows(protos + g_text)

    means = z @ mean_map.T
    scales = cfg.scale_base * np.exp(0.5 * (z @ scale_map.T))
    noise = rng.standard_normal((n, M, 3))
    clouds = means[:, None, :] + scales[:, None, :] * noise

    return TripletDataset(
        clouds=clouds.astype(np.float32),
        image_emb=EmbeddingBatch(Modality.IMAGE, image.astype(np.float32)),
        text_emb=EmbeddingBatch(Modality.TEXT, text.astype(np.float32)),
        labels=labels,
        class_text_emb=EmbeddingBatch(Modality.TEXT, class_text.astype(np.float32)),
        category_names=[f"category_{c:03d}" for c in range(C)],
        config=cfg,
    )


def split_holdout(ds: TripletDataset, fraction: float) -> tuple[TripletDataset, TripletDataset | None]:
    """Split off the last ``round(fraction * count)`` samples of every category.

    Returns ``(train, held_out)``; ``held_out`` is None when nothing is held out.
    """
    if not 0 <= fraction < 1:
        raise InvalidConfig("holdout fraction must be in [0, 1)")
    train_idx, test_idx = [], []
    for c in range(ds.n_categories):
        idx = np.flatnonzero(ds.labels == c)
        k = int(round(fraction * len(idx)))
        if k >= len(idx) and len(idx):
            k = len(idx) - 1
        train_idx.extend(idx[: len(idx) - k])
        test_idx.extend(idx[len(idx) - k:])
    train = ds.subset(sorted(train_idx))
    held = ds.subset(sorted(test_idx)) if test_idx else None
    return train, held


def save_embeddings(batch: EmbeddingBatch, path) -> None:
    """Write ``batch`` in the little-endian ``MRDE`` format (float32 payload)."""
    header = _HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, int(batch.modality), batch.n, batch.d)
    payload = np.ascontiguousarray(batch.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise MRDIOError(f"cannot write embeddings to {path}: {exc}") from exc


def load_embeddings(path) -> EmbeddingBatch:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise MRDIOError(f"cannot read embeddings from {path}: {exc}") from exc
    if len(raw) < _HEADER.size or raw[:4] != EMBEDDING_MAGIC:
        raise BadMagic(f"{path} is not an MRDE embedding file")
    magic, version, modality, n, d = _HEADER.unpack_from(raw)
    if version != EMBEDDING_VERSION or modality not in {m.value for m in Modality}:
        raise BadMagic(f"{path}: unsupported version {version} or modality {modality}")
    payload = raw[_HEADER.size:]
    if len(payload) != n * d * 4:
        raise DimMismatch(f"{path}: header says {n} x {d} but payload holds {len(payload) // 4} floats")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return EmbeddingBatch(Modality(modality), data)


def save_dataset(ds: TripletDataset, directory) -> Path:
    """Write embedding files, the cloud array and ``manifest.json`` into ``directory``."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "image": "image.mrde",
            "text": "text.mrde",
            "class_text": "class_text.mrde",
            "clouds": "clouds.npy",
        }
        save_embeddings(ds.image_emb, out / files["image"])
        save_embeddings(ds.text_emb, out / files["text"])
        save_embeddings(ds.class_text_emb, out / files["class_text"])
        np.save(out / files["clouds"], np.ascontiguousarray(ds.clouds, dtype="<f4"), allow_pickle=False)
        manifest = {
            "format": MANIFEST_FORMAT,
            "version": 1,
            "files": files,
            "labels": [int(x) for x in ds.labels],
            "category_names": list(ds.category_names),
            "synth_config": ds.config.to_dict() if ds.config is not None else None,
        }
        (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except MRDIOError:
        raise
    except OSError as exc:
        raise MRDIOError(f"cannot write dataset to {out}: {exc}") from exc
    return out / MANIFEST_NAME


def load_dataset(path) -> TripletDataset:
    """Load a dataset from a directory or from its manifest path."""
    p = Path(path)
    manifest_path = p / MANIFEST_NAME if p.is_dir() else p
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise MRDIOError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadMagic(f"{manifest_path} is not valid JSON: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise BadMagic(f"{manifest_path} is not an mrd dataset manifest")
    root = manifest_path.parent
    files = manifest["files"]
    try:
        clouds = np.load(root / files["clouds"], allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise MRDIOError(f"cannot read clouds: {exc}") from exc
    cfg = manifest.get("synth_config")
    return TripletDataset(
        clouds=clouds,
        image_emb=load_embeddings(root / files["image"]),
        text_emb=load_embeddings(root / files["text"]),
        labels=np.asarray(manifest["labels"], dtype=np.int64),
        class_text_emb=load_embeddings(root / files["class_text"]),
        category_names=manifest["category_names"],
        config=SynthConfig.from_dict(cfg) if cfg else None,
    )


def mean_gap_norm(ds: TripletDataset) -> float:
    """Norm of the mean image-minus-text embedding difference."""
    diff = ds.image_emb.data.astype(np.float64) - ds.text_emb.data.astype(np.float64)
    return float(np.linalg.norm(diff.mean(axis=0)))


__all__ = [
    "Modality",
    "EmbeddingBatch",
    "SynthConfig",
    "TripletDataset",
    "l2_normalize",
    "normalize_rows",
    "gen_synthetic_triplets",
    "split_holdout",
    "save_embeddings",
    "load_embeddings",
    "save_dataset",
    "load_dataset",
    "mean_gap_norm",
]
