"""Synthetic paired-modality datasets and the ``HAVF`` feature-file format.

File layout (all little-endian)::

    b"HAVF"  u16 version=1  u16 flags  u32 rows  u32 dim  f32[rows*dim]

Each feature file may carry a JSON sidecar with the same basename and the
suffix ``.meta.json``. Checkpoints reuse the container: a sequence of HAVF
records, one per tensor, with names and original shapes listed in the
sidecar.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"HAVF"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")

FEATURE_DIM = 512
LATENT_DIM = 64


@dataclass
class FeatureBatch:
    data: np.ndarray
    labels: np.ndarray = None
    flags: int = 0

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.data):
            raise DataError("labels and rows disagree in length")


def encode_features(data, flags=0):
    data = np.asarray(data)
    if data.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {data.shape}")
    rows, dim = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, flags, rows, dim) + payload


def decode_features(buf, offset=0):
    """Decode one record; returns ``(FeatureBatch, next_offset)``."""
    head = bytes(buf[offset : offset + 4])
    if head != MAGIC[: len(head)]:
        raise FormatError("bad_magic", f"expected {MAGIC!r}, found {head!r}")
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated_header", f"need {_HEADER.size} header bytes")
    magic, version, flags, rows, dim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError("bad_magic", f"expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise FormatError("version_mismatch", f"expected version {VERSION}, found {version}")
    start = offset + _HEADER.size
    end = start + 4 * rows * dim
    if end > len(buf):
        raise FormatError(
            "truncated_payload", f"header promises {rows}x{dim} floats, payload is shorter"
        )
    data = np.frombuffer(buf, dtype="<f4", count=rows * dim, offset=start).reshape(rows, dim)
    return FeatureBatch(data.astype(np.float32), flags=flags), end


def write_features(path, batch, flags=None):
    if isinstance(batch, FeatureBatch):
        data = batch.data
        flags = batch.flags if flags is None else flags
    else:
        data = batch
        flags = 0 if flags is None else flags
    with open(path, "wb") as fh:
        fh.write(encode_features(data, flags))


def read_features(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    batch, end = decode_features(buf)
    if end != len(buf):
        raise FormatError(
            "truncated_payload",
            f"header promises {batch.data.size} floats, payload has {(len(buf) - _HEADER.size) // 4}",
        )
    meta = read_sidecar(path)
    if meta and "labels" in meta:
        batch.labels = np.asarray(meta["labels"], dtype=np.int64)
    return batch


def sidecar_path(path):
    root, _ = os.path.splitext(str(path))
    return root + ".meta.json"


def write_sidecar(path, meta):
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_sidecar(path):
    p = sidecar_path(path)
    if not os.path.exists(p):
        return None
    with open(p) as fh:
        return json.load(fh)


def write_checkpoint(path, tensors, extra=None):
    """Write named arrays as consecutive HAVF records plus a sidecar index.

    ``extra`` holds scalar metadata (e.g. temperature) stored in the sidecar.
    """
    sections = []
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            fh.write(encode_features(arr.reshape(1, -1) if arr.ndim < 2 else arr.reshape(arr.shape[0], -1)))
            sections.append({"name": name, "shape": list(arr.shape)})
    write_sidecar(path, {**(extra or {}), "format": "havf-checkpoint", "sections": sections})


def read_checkpoint(path):
    meta = read_sidecar(path)
    if not meta or "sections" not in meta:
        raise DataError(f"{path}: checkpoint index {sidecar_path(path)} missing")
    with open(path, "rb") as fh:
        buf = fh.read()
    out = {}
    offset = 0
    for sec in meta["sections"]:
        batch, offset = decode_features(buf, offset)
        out[sec["name"]] = batch.data.reshape(sec["shape"])
    if offset != len(buf):
        raise FormatError("truncated_payload", "trailing bytes after last checkpoint section")
    return out


# -- taxonomy and synthesis -------------------------------------------------


@dataclass
class Taxonomy:
    superclasses: list
    classes: list  # (name, superclass index)

    def __post_init__(self):
        self.classes = [(str(n), int(s)) for n, s in self.classes]
        if len(self.superclasses) < 2:
            raise ConfigError("taxonomy needs at least two superclasses")
        counts = np.bincount([s for _, s in self.classes], minlength=len(self.superclasses))
        if len(counts) != len(self.superclasses) or counts.min() < 2:
            raise ConfigError("every superclass needs at least two classes")

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def class_to_super(self):
        return np.array([s for _, s in self.classes], dtype=np.int64)

    def to_dict(self):
        return {"superclasses": list(self.superclasses), "classes": [list(c) for c in self.classes]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["superclasses"]), [tuple(c) for c in d["classes"]])


def generate_taxonomy(num_super, classes_per_super, seed=0):
    """Two-level taxonomy named ``S{i}/C{j}``; the seed shuffles class order."""
    if num_super < 2 or classes_per_super < 2:
        raise ConfigError("need num_super >= 2 and classes_per_super >= 2")
    supers = [f"S{i}" for i in range(num_super)]
    classes = [(f"S{i}/C{j}", i) for i in range(num_super) for j in range(classes_per_super)]
    order = np.random.default_rng(seed).permutation(len(classes))
    return Taxonomy(supers, [classes[i] for i in order])


@dataclass
class DatasetBundle:
    video: np.ndarray
    audio: np.ndarray
    words: np.ndarray
    labels: np.ndarray
    taxonomy: Taxonomy
    seen: np.ndarray = None  # per class
    split: np.ndarray = None  # per row, "train" / "test"
    latent: np.ndarray = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if len(self.video) != n or len(self.audio) != n:
            raise DataError("modality row counts disagree with labels")
        k = self.taxonomy.num_classes
        if len(self.words) != k:
            raise DataError("need one word vector per class")
        if n and (self.labels.min() < 0 or self.labels.max() >= k):
            raise DataError("labels out of class range")
        if self.seen is None:
            self.seen = np.ones(k, dtype=bool)
        if self.split is None:
            self.split = np.array(["train"] * n)

    @property
    def num_classes(self):
        return self.taxonomy.num_classes

    def rows(self, tag):
        return np.flatnonzero(self.split == tag)

    def subset(self, tag):
        idx = self.rows(tag)
        return DatasetBundle(
            self.video[idx],
            self.audio[idx],
            self.words,
            self.labels[idx],
            self.taxonomy,
            self.seen.copy(),
            self.split[idx],
            None if self.latent is None else self.latent[idx],
            dict(self.config),
        )

    def meta(self):
        return {
            "labels": [int(x) for x in self.labels],
            "split": [str(s) for s in self.split],
            "class_names": [n for n, _ in self.taxonomy.classes],
            "superclass_index": [int(s) for _, s in self.taxonomy.classes],
            "superclasses": list(self.taxonomy.superclasses),
            "seen": [bool(s) for s in self.seen],
            "config": self.config,
        }

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        meta = self.meta()
        for name, arr in (("video", self.video), ("audio", self.audio)):
            path = os.path.join(directory, f"{name}.havf")
            write_features(path, arr)
            write_sidecar(path, meta)
        words = os.path.join(directory, "words.havf")
        write_features(words, self.words)
        write_sidecar(words, {k: meta[k] for k in ("class_names", "superclass_index", "superclasses", "seen")})
        if self.latent is not None:
            write_features(os.path.join(directory, "latent.havf"), self.latent)

    @classmethod
    def load(cls, directory):
        vpath = os.path.join(directory, "video.havf")
        if not os.path.exists(vpath):
            raise DataError(f"{directory}: no video.havf")
        meta = read_sidecar(vpath)
        if meta is None:
            raise DataError(f"{vpath}: sidecar metadata missing")
        tax = Taxonomy(
            meta["superclasses"], list(zip(meta["class_names"], meta["superclass_index"]))
        )
        latent_path = os.path.join(directory, "latent.havf")
        latent = read_features(latent_path).data if os.path.exists(latent_path) else None
        return cls(
            read_features(vpath).data,
            read_features(os.path.join(directory, "audio.havf")).data,
            read_features(os.path.join(directory, "words.havf")).data,
            np.asarray(meta["labels"], dtype=np.int64),
            tax,
            np.asarray(meta["seen"], dtype=bool),
            np.asarray(meta["split"]),
            latent,
            meta.get("config", {}),
        )


def synthesize(
    tax,
    per_class,
    sigma=0.1,
    gamma=0.2,
    seed=0,
    offset_scale=0.3,
    latent_dim=LATENT_DIM,
    feature_dim=FEATURE_DIM,
):
    """Sample a hierarchical paired dataset (all classes seen, all rows train).

    Superclass prototypes sit on the unit sphere of a latent space, class
    prototypes are offset from them by ``offset_scale``, and samples add
    isotropic noise ``sigma``. Each modality is a fixed random linear lift of
    the latent plus its own noise of scale ``gamma``; word vectors lift the
    clean class prototype.
    """
    if per_class < 2:
        raise ConfigError("per_class must be >= 2")
    if sigma < 0 or gamma < 0:
        raise ConfigError("sigma and gamma must be non-negative")
    rng = np.random.default_rng(seed)

    def unit(n):
        z = rng.standard_normal((n, latent_dim))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    supers = unit(len(tax.superclasses))
    protos = supers[tax.class_to_super] + offset_scale * unit(tax.num_classes)
    labels = np.repeat(np.arange(tax.num_classes), per_class)
    latent = protos[labels] + sigma * rng.standard_normal((len(labels), latent_dim))

    scale = 1.0 / np.sqrt(latent_dim)
    lift_v = scale * rng.standard_normal((latent_dim, feature_dim))
    lift_a = scale * rng.standard_normal((latent_dim, feature_dim))
    lift_w = scale * rng.standard_normal((latent_dim, feature_dim))
    video = latent @ lift_v + gamma * rng.standard_normal((len(labels), feature_dim))
    audio = latent @ lift_a + gamma * rng.standard_normal((len(labels), feature_dim))
    words = protos @ lift_w

    config = {
        "per_class": per_class,
        "sigma": sigma,
        "gamma": gamma,
        "seed": seed,
        "offset_scale": offset_scale,
        "latent_dim": latent_dim,
        "feature_dim": feature_dim,
    }
    f32 = np.float32
    return DatasetBundle(
        video.astype(f32), audio.astype(f32), words.astype(f32), labels, tax,
        latent=latent.astype(f32), config=config,
    )


def split_gzsl(bundle, unseen_fraction=0.5, seed=0, seen_test_fraction=0.2):
    """Mark unseen classes and tag rows as train/test.

    Unseen classes are spread across superclasses round-robin. Their rows go
    entirely to test; each seen class holds out ``seen_test_fraction`` of its
    rows for test.
    """
    if not 0.0 < unseen_fraction < 1.0:
        raise ConfigError("unseen_fraction must lie in (0, 1)")
    tax = bundle.taxonomy
    k = tax.num_classes
    n_unseen = int(round(unseen_fraction * k))
    if n_unseen <= 0 or n_unseen >= k:
        raise ConfigError(f"unseen_fraction={unseen_fraction} leaves no seen or no unseen class")
    rng = np.random.default_rng(seed)
    pools = [list(rng.permutation(np.flatnonzero(tax.class_to_super == s))) for s in range(len(tax.superclasses))]
    order = rng.permutation(len(pools))
    unseen = []
    while len(unseen) < n_unseen:
        for s in order:
            if pools[s] and len(unseen) < n_unseen:
                unseen.append(int(pools[s].pop()))
    seen = np.ones(k, dtype=bool)
    seen[unseen] = False

    split = np.array(["test"] * len(bundle.labels), dtype="<U5")
    for cls in np.flatnonzero(seen):
        rows = np.flatnonzero(bundle.labels == cls)
        n_test = int(round(seen_test_fraction * len(rows)))
        train_rows = rng.permutation(rows)[n_test:]
        split[train_rows] = "train"

    config = dict(bundle.config)
    config.update({"unseen_fraction": unseen_fraction, "split_seed": seed, "seen_test_fraction": seen_test_fraction})
    return DatasetBundle(
        bundle.video, bundle.audio, bundle.words, bundle.labels, tax, seen, split,
        bundle.latent, config,
    )


def default_dataset(seed=0, num_super=3, classes_per_super=4, per_class=50, unseen_fraction=0.5, **kwargs):
    """The reference desk-scale dataset: 3 supers x 4 classes x 50 samples, half unseen."""
    tax = generate_taxonomy(num_super, classes_per_super, seed)
    bundle = synthesize(tax, per_class, seed=seed, **kwargs)
    return split_gzsl(bundle, unseen_fraction, seed)
