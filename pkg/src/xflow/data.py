"""Audiovisual examples, the XFT tensor file format, windowing, splits and synthetic data.

XFT record layout (little-endian)::

    magic   4 bytes   b"XFT1" (float32 payload) or b"XFD1" (float64 payload)
    ndim    u32
    dims    ndim x u32
    payload prod(dims) values, row-major

Datasets are stored as a directory holding ``manifest.json`` and one XFT file
per modality per example.
"""
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xflow.errors import ContractError, FormatError, ValidationError

XFT_MAGIC = b"XFT1"
XFD_MAGIC = b"XFD1"
_DTYPES = {XFT_MAGIC: np.dtype("<f4"), XFD_MAGIC: np.dtype("<f8")}
MANIFEST = "manifest.json"


# ---------------------------------------------------------------- XFT records

def encode_tensor(arr, precision="f32"):
    arr = np.asarray(arr)
    if arr.ndim == 0:
        raise ContractError("cannot encode a rank-0 tensor")
    magic = {"f32": XFT_MAGIC, "f64": XFD_MAGIC}[precision]
    header = magic + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[magic]).tobytes()


def decode_tensor(buf, offset=0, path=None):
    """Parse one record starting at ``offset``; returns (float64 array, offset after record)."""
    buf = memoryview(buf)
    if len(buf) - offset < 8:
        raise FormatError("truncated tensor header", offset, path)
    magic = bytes(buf[offset:offset + 4])
    if magic not in _DTYPES:
        raise FormatError(f"bad tensor magic {magic!r}", offset, path)
    (ndim,) = struct.unpack_from("<I", buf, offset + 4)
    if ndim == 0:
        raise FormatError("tensor rank must be >= 1", offset + 4, path)
    pos = offset + 8
    if len(buf) - pos < 4 * ndim:
        raise FormatError(f"truncated dims (need {ndim})", pos, path)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    if any(d == 0 for d in dims):
        raise FormatError(f"zero-sized dimension in {dims}", pos, path)
    pos += 4 * ndim
    dtype = _DTYPES[magic]
    nbytes = math.prod(dims) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", pos, path)
    arr = np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=pos).reshape(dims)
    return arr.astype(np.float64), pos + nbytes


def write_xft(path, arr, precision="f32"):
    Path(path).write_bytes(encode_tensor(arr, precision))


def read_xft(path):
    data = Path(path).read_bytes()
    arr, end = decode_tensor(data, 0, path)
    if end != len(data):
        raise FormatError(f"{len(data) - end} trailing bytes after tensor", end, path)
    return arr


# ---------------------------------------------------------------- examples

@dataclass
class Example:
    frames: np.ndarray  # [T, H, W], intensities in [0, 1]
    mfcc: np.ndarray  # [T, D]
    label: int
    person_id: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.mfcc = np.asarray(self.mfcc, dtype=np.float64)
        if self.frames.ndim != 3 or self.mfcc.ndim != 2:
            raise ContractError(f"frames must be [T,H,W] and mfcc [T,D], got {self.frames.shape}, {self.mfcc.shape}")
        if self.frames.shape[0] != self.mfcc.shape[0]:
            raise ContractError(
                f"modality length mismatch: {self.frames.shape[0]} frames vs {self.mfcc.shape[0]} mfcc vectors")
        self.label = int(self.label)
        self.person_id = int(self.person_id)

    @property
    def length(self):
        return self.frames.shape[0]


@dataclass
class Dataset:
    examples: list
    num_classes: int
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for e in self.examples:
            if not 0 <= e.label < self.num_classes:
                raise ValidationError(f"label {e.label} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def labels(self):
        return np.array([e.label for e in self.examples], dtype=np.intp)

    @property
    def person_ids(self):
        return np.array([e.person_id for e in self.examples], dtype=np.intp)

    def subset(self, indices):
        return Dataset([self.examples[i] for i in indices], self.num_classes, self.name, dict(self.metadata))


# ---------------------------------------------------------------- preprocessing

def window_bounds(length, target, overlap=0.0):
    """Contiguous near-equal windows; the remainder goes to the leading windows.

    ``overlap`` widens every window by that fraction of its size on each side
    (clipped to the sequence).
    """
    if not 1 <= target <= length:
        raise ContractError(f"cannot average {length} steps into {target} windows")
    base, extra = divmod(length, target)
    bounds, lo = [], 0
    for i in range(target):
        hi = lo + base + (1 if i < extra else 0)
        pad = int(round(overlap * (hi - lo)))
        bounds.append((max(0, lo - pad), min(length, hi + pad)))
        lo = hi
    return bounds


def sliding_window_average(example, target_T, overlap=0.0):
    """Average both modalities over identical windows, giving ``target_T`` steps."""
    if example.length == target_T and overlap == 0:
        return example
    bounds = window_bounds(example.length, target_T, overlap)
    frames = np.stack([example.frames[lo:hi].mean(axis=0) for lo, hi in bounds])
    mfcc = np.stack([example.mfcc[lo:hi].mean(axis=0) for lo, hi in bounds])
    return Example(frames, mfcc, example.label, example.person_id)


def group_kfold(dataset, k):
    """Person-grouped folds: persons (sorted by id) are dealt round-robin into k folds.

    Returns a list of (train_indices, test_indices).
    """
    persons = dataset.person_ids if isinstance(dataset, Dataset) else np.asarray(dataset)
    unique = np.unique(persons)
    if k < 2:
        raise ContractError(f"k must be >= 2 to leave training data, got {k}")
    if len(unique) < k:
        raise ContractError(f"{len(unique)} persons cannot fill {k} folds")
    fold_of = {p: i % k for i, p in enumerate(unique)}
    assignment = np.array([fold_of[p] for p in persons])
    idx = np.arange(len(persons))
    return [(idx[assignment != f], idx[assignment == f]) for f in range(k)]


# ---------------------------------------------------------------- synthetic data

def class_codes(num_classes):
    """(q, n_freq): classes split into a position code c % q and a frequency code c // q."""
    q = math.ceil(math.sqrt(num_classes))
    return q, math.ceil(num_classes / q)


def gen_synthetic(num_classes=10, n_persons=15, per_class=5, t_min=12, t_max=20,
                  height=16, width=16, seed=0, mfcc_dim=26):
    """Aligned audiovisual toy data where each modality carries half the class.

    The image stream shows a Gaussian blob whose horizontal position encodes
    ``c % q`` (q = ceil(sqrt(C))) and whose vertical position oscillates over
    the clip. The MFCC stream is a cosine pattern over coefficients whose
    frequency encodes ``c // q``, amplitude-modulated in step with the blob.
    Each person adds a fixed offset to both modalities; every frame adds noise.
    Values are rounded to float32 so on-disk round trips are exact.
    """
    if num_classes < 2:
        raise ContractError("need at least 2 classes")
    if not 1 <= t_min <= t_max:
        raise ContractError(f"invalid length range [{t_min}, {t_max}]")
    rng = np.random.default_rng(seed)
    q, _ = class_codes(num_classes)
    spacing = width / q
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    coef = np.arange(mfcc_dim) + 0.5
    examples = []
    for person in range(n_persons):
        dx = rng.uniform(-0.12, 0.12) * spacing
        dy = rng.uniform(-0.08, 0.08) * height
        background = rng.uniform(0.1, 0.25)
        amplitude = rng.uniform(0.55, 0.75)
        sigma = rng.uniform(0.06, 0.09) * min(height, width)
        phase = rng.uniform(0, 2 * np.pi)
        offset = rng.normal(0.0, 0.3, mfcc_dim)
        for label in range(num_classes):
            pos, freq = label % q, label // q
            for _ in range(per_class):
                steps = int(rng.integers(t_min, t_max + 1))
                cycles = rng.uniform(0.8, 1.5)
                wave = np.sin(2 * np.pi * cycles * np.arange(steps) / steps + phase)
                cx = (pos + 0.5) * spacing + dx
                cy = height / 2 + dy + 0.18 * height * wave
                blob = np.exp(-((xx - cx) ** 2 + (yy[None] - cy[:, None, None]) ** 2) / (2 * sigma**2))
                frames = background + amplitude * blob + rng.normal(0, 0.03, (steps, height, width))
                frames = np.clip(frames, 0.0, 1.0)
                pattern = 2.0 * np.cos(np.pi * (freq + 1) * coef / mfcc_dim)
                mfcc = (1.0 + 0.5 * wave)[:, None] * pattern + offset + rng.normal(0, 0.3, (steps, mfcc_dim))
                examples.append(Example(frames.astype(np.float32), mfcc.astype(np.float32), label, person))
    meta = {"generator": "synthetic", "seed": seed, "height": height, "width": width,
            "mfcc_dim": mfcc_dim, "t_min": t_min, "t_max": t_max}
    return Dataset(examples, num_classes, name=f"synthetic-c{num_classes}-p{n_persons}", metadata=meta)


# ---------------------------------------------------------------- dataset directories

def save_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(dataset.examples):
        frames_file, mfcc_file = f"ex{i:05d}_frames.xft", f"ex{i:05d}_mfcc.xft"
        write_xft(directory / frames_file, e.frames)
        write_xft(directory / mfcc_file, e.mfcc)
        entries.append({"frames_file": frames_file, "mfcc_file": mfcc_file,
                        "label": e.label, "person_id": e.person_id})
    manifest = {"name": dataset.name, "num_classes": dataset.num_classes,
                "metadata": dataset.metadata, "examples": entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{directory / MANIFEST}: invalid JSON ({exc})") from exc
    for key in ("num_classes", "examples"):
        if key not in manifest:
            raise ValidationError(f"manifest missing {key!r}")
    examples = []
    for i, entry in enumerate(manifest["examples"]):
        missing = {"frames_file", "mfcc_file", "label", "person_id"} - set(entry)
        if missing:
            raise ValidationError(f"manifest entry {i} missing {sorted(missing)}")
        frames = read_xft(directory / entry["frames_file"])
        mfcc = read_xft(directory / entry["mfcc_file"])
        if frames.ndim != 3 or mfcc.ndim != 2 or frames.shape[0] != mfcc.shape[0]:
            raise ValidationError(
                f"manifest entry {i}: frames {frames.shape} and mfcc {mfcc.shape} do not form an example")
        examples.append(Example(frames, mfcc, entry["label"], entry["person_id"]))
    return Dataset(examples, int(manifest["num_classes"]), manifest.get("name", ""), manifest.get("metadata", {}))
