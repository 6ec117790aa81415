"""Interpretability exports: temporal difference series through the 1D->2D
residual connection, connection-output feature dumps, and feature-map images."""
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xflow import autodiff as ad
from xflow.errors import ContractError
from xflow.models import CONNECTION_PREFIXES

DIFF_CONNECTION = "resconn_12_1"


@dataclass(frozen=True)
class DiffSeries:
    """Squared L2 changes between consecutive time steps (T-1 rows).

    ``diff_img_per_kernel[t, k]`` is the change of deconvolution kernel k's
    output map; ``diff_img`` sums it over kernels.
    """

    diff_mfcc: np.ndarray
    diff_img_per_kernel: np.ndarray

    @property
    def diff_img(self):
        return self.diff_img_per_kernel.sum(axis=1)

    def __len__(self):
        return len(self.diff_mfcc)

    def write_csv(self, path):
        k = self.diff_img_per_kernel.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "diff_mfcc", "diff_img"] + [f"diff_img_k{j}" for j in range(k)])
            for t in range(len(self)):
                w.writerow([t + 1, repr(float(self.diff_mfcc[t])), repr(float(self.diff_img[t]))]
                           + [repr(float(v)) for v in self.diff_img_per_kernel[t]])


def connection_output(conn, x):
    """Evaluate a connection pipeline on a batch of raw inputs without recording gradients."""
    with ad.no_grad():
        return conn(ad.constant(np.asarray(x, dtype=np.float64))).value


def diff_series(model, example):
    """Difference series for an LSTM model's first 1D->2D residual connection.

    ``example`` is an :class:`~xflow.data.Example` or a (frames, mfcc) pair.
    The connection output is taken after its PReLU, i.e. what the CNN stream
    receives at the merge.
    """
    if model.config.architecture != "cnn_mlp_lstm":
        raise ContractError("diff_series needs a cnn_mlp_lstm model (per-frame MFCC inputs)")
    conn = getattr(model, DIFF_CONNECTION, None)
    if conn is None:
        raise ContractError(f"model has no {DIFF_CONNECTION} connection (residual connections disabled)")
    frames, mfcc = (example.frames, example.mfcc) if hasattr(example, "mfcc") else example
    _, x = model.encode_arrays(frames, mfcc)
    if x.shape[0] < 2:
        raise ContractError(f"difference series needs T >= 2, got T={x.shape[0]}")
    dx = np.diff(x, axis=0)
    dy = np.diff(connection_output(conn, x), axis=0)  # [T-1, K, H, W]
    return DiffSeries(np.sum(dx * dx, axis=1), np.sum(dy * dy, axis=(2, 3)))


# ---------------------------------------------------------------- connection features

def connection_names(model):
    return [n for n in vars(model) if n.startswith(CONNECTION_PREFIXES) and getattr(model, n) is not None]


def connection_features(model, dataset, connection_id, batch_size=64):
    """[N, F] eval-mode connection outputs, flattened per example.

    In the LSTM model connections run per frame; a clip's feature is the
    average of its per-frame outputs.
    """
    if connection_id not in connection_names(model):
        raise ContractError(f"unknown connection {connection_id!r}; model has {connection_names(model)}")
    examples = list(dataset)
    was_training = model.training
    model.eval()
    rows = []
    try:
        for i in range(0, len(examples), batch_size):
            encoded = [model.encode(e) for e in examples[i:i + batch_size]]
            out = model.trace(encoded)[connection_id]
            if model.config.architecture == "cnn_mlp":
                rows.append(out.reshape(len(encoded), -1))
            else:
                ends = np.cumsum([e[0].shape[0] for e in encoded])[:-1]
                rows.append(np.stack([c.reshape(c.shape[0], -1).mean(axis=0) for c in np.split(out, ends)]))
    finally:
        model.train(was_training)
    return np.concatenate(rows)


def cosine_cluster_ratio(features, labels):
    """Mean intra-class over mean inter-class cosine distance (lower = tighter clusters)."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    unit = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    dist = 1.0 - unit @ unit.T
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(f), dtype=bool)
    intra, inter = dist[same & off_diag], dist[~same]
    if intra.size == 0 or inter.size == 0:
        raise ContractError("cluster ratio needs at least two classes and a class with two examples")
    return {"intra_mean": float(intra.mean()), "inter_mean": float(inter.mean()),
            "ratio": float(intra.mean() / inter.mean()) if inter.mean() > 0 else float("inf")}


def export_connection_features(model, dataset, connection_id, out_path, summary_path=None):
    """Write one CSV row (example_id, person_id, label, features...) per example.

    A JSON summary with the cosine cluster ratio goes to ``summary_path``
    (default: the CSV path with a .json suffix). Returns the feature matrix.
    """
    feats = connection_features(model, dataset, connection_id)
    out_path = Path(out_path)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "person_id", "label"] + [f"f{j}" for j in range(feats.shape[1])])
        for i, (e, row) in enumerate(zip(dataset, feats)):
            w.writerow([i, e.person_id, e.label] + [repr(float(v)) for v in row])
    summary = {"connection": connection_id, "n_examples": int(feats.shape[0]), "width": int(feats.shape[1])}
    if len(set(dataset.labels)) > 1 and len(dataset.labels) > len(set(dataset.labels)):
        summary["cosine_cluster"] = cosine_cluster_ratio(feats, dataset.labels)
    summary_path = Path(summary_path) if summary_path else out_path.with_suffix(".json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return feats


# ---------------------------------------------------------------- feature maps

def to_gray(channel):
    """Min-max normalize a 2D array to uint8; a constant channel maps to 128."""
    c = np.asarray(channel, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ContractError("feature map contains non-finite values")
    lo, hi = c.min(), c.max()
    if hi == lo:
        return np.full(c.shape, 128, dtype=np.uint8)
    return np.rint((c - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


def export_feature_map(tensor, out_prefix):
    """Write each channel of a [C, H, W] tensor as ``<out_prefix>_c<idx>.pgm``; returns the paths."""
    t = np.asarray(tensor)
    if t.ndim != 3:
        raise ContractError(f"feature map must be [C, H, W], got shape {t.shape}")
    paths = []
    for c in range(t.shape[0]):
        path = Path(f"{out_prefix}_c{c:03d}.pgm")
        write_pgm(path, to_gray(t[c]))
        paths.append(path)
    return paths


def connection_map(model, example, connection_id=None, step=0):
    """[C, H, W] output of a 1D->2D connection for one example (one time step for the LSTM model)."""
    names = [n for n in connection_names(model) if n.startswith(("resconn_12", "xconn_12"))]
    connection_id = connection_id or (names[0] if names else None)
    if connection_id is None or connection_id not in names:
        raise ContractError(f"no 1D->2D connection {connection_id!r}; model has {names}")
    was_training = model.training
    model.eval()
    try:
        out = model.trace([model.encode(example)])[connection_id]
    finally:
        model.train(was_training)
    if not 0 <= step < out.shape[0]:
        raise ContractError(f"step {step} out of range for {out.shape[0]} rows")
    return out[step]
