"""The two audiovisual architectures, with or without cross-modal connections.

``cnn_mlp`` classifies a clip from a fixed number of averaged windows: the
image stream sees the windows as input channels, the MFCC stream sees them
flattened. ``cnn_mlp_lstm`` runs a (smaller) two-stream extractor on every
frame with shared weights and feeds the per-frame features to an LSTM.

Both share the same two-block layout::

    CNN:  BN(input) -> conv block 1 -> pool -> merge 1 -> conv block 2 -> pool -> merge 2 -> dense
    MLP:  dense 1 ----------------------------> merge 1 -> dense 2 --------------> merge 2

At merge d the 1D->2D connections feed the CNN and the 2D->1D connections
feed the MLP. Cross-connections read the other stream's current
representation; residual connections read the other stream's raw input.
"""
import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xflow import autodiff as ad
from xflow.data import Example, decode_tensor, encode_tensor, sliding_window_average
from xflow.errors import ContractError, FormatError, ValidationError
from xflow.nn import LSTM, BatchNorm, Conv2D, Dense, Dropout, MaxPool2D, Module
from xflow.xconn import ResConn1Dto2D, ResConn2Dto1D, XConn1Dto2D, XConn2Dto1D, merge, reshape_size

ARCHITECTURES = ("cnn_mlp", "cnn_mlp_lstm")
ARCHIVE_MAGIC = b"XFP1"
CONNECTION_PREFIXES = ("xconn_", "resconn_")

# layer widths at width_mult = 1
_WIDTHS = {
    "cnn_mlp": {"conv": (16, 32), "convs_per_block": 2, "mlp": (128, 128), "x21": (64, 128),
                "cnn_fc": 256, "head": 512, "block_regularizers": True},
    "cnn_mlp_lstm": {"conv": (8, 16), "convs_per_block": 1, "mlp": (32, 32), "x21": (32, 64),
                     "cnn_fc": 64, "head": 64, "block_regularizers": False},
}
# deconv kernels as tabulated for merge targets of 40x30 and 20x15
_TABLE_KERNELS = {"cnn_mlp": ((8, 8), (4, 4)), "cnn_mlp_lstm": ((16, 16), (8, 8))}
_TABLE_TARGETS = ((40, 30), (20, 15))


def scale_kernel(kernel, target_hw, table_hw):
    """Rescale a tabulated deconv kernel to another merge-target size (round half up, clamp to [1, t])."""
    return tuple(int(min(max(np.floor(k * t / p + 0.5), 1), t)) for k, t, p in zip(kernel, target_hw, table_hw))


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "cnn_mlp"
    num_classes: int = 26
    height: int = 80
    width: int = 60
    mfcc_dim: int = 26
    t_avg: int = 11
    use_xconns: bool = True
    use_resconns: bool = True
    seed: int = 0
    width_mult: float = 1.0
    lstm_output: str = "last"
    deconv_kernels: tuple = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")
        if self.height < 4 or self.width < 4 or self.height % 4 or self.width % 4:
            raise ValidationError(f"image dims must be positive multiples of 4, got {self.height}x{self.width}")
        if self.mfcc_dim < 1 or self.t_avg < 1:
            raise ValidationError("mfcc_dim and t_avg must be >= 1")
        if not self.width_mult > 0:
            raise ValidationError(f"width_mult must be positive, got {self.width_mult}")
        if self.lstm_output not in ("last", "mean"):
            raise ValidationError(f"lstm_output must be 'last' or 'mean', got {self.lstm_output!r}")
        if self.deconv_kernels is not None:
            kernels = tuple(tuple(int(v) for v in k) for k in self.deconv_kernels)
            if len(kernels) != 2 or any(len(k) != 2 for k in kernels):
                raise ValidationError(f"deconv_kernels must be two (kh, kw) pairs, got {self.deconv_kernels}")
            object.__setattr__(self, "deconv_kernels", kernels)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def baseline(self):
        return self.replace(use_xconns=False, use_resconns=False)

    def to_dict(self):
        d = dataclasses.asdict(self)
        if d["deconv_kernels"] is not None:
            d["deconv_kernels"] = [list(k) for k in d["deconv_kernels"]]
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValidationError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def layout(config):
    """Concrete layer sizes for a config (widths scaled, kernels fitted to the image size)."""
    w = _WIDTHS[config.architecture]

    def s(v):
        return max(1, int(round(v * config.width_mult)))

    h, wd = config.height, config.width
    spatial = ((h, wd), (h // 2, wd // 2), (h // 4, wd // 4))
    if config.deconv_kernels is not None:
        kernels = config.deconv_kernels
    else:
        kernels = tuple(scale_kernel(k, t, p) for k, t, p in
                        zip(_TABLE_KERNELS[config.architecture], spatial[1:], _TABLE_TARGETS))
    for k, t in zip(kernels, spatial[1:]):
        reshape_size(t, k)
    lstm = config.architecture == "cnn_mlp_lstm"
    return {
        "c_in": 1 if lstm else config.t_avg,
        "n_in": config.mfcc_dim if lstm else config.t_avg * config.mfcc_dim,
        "conv": tuple(s(c) for c in w["conv"]),
        "convs_per_block": w["convs_per_block"],
        "mlp": tuple(s(m) for m in w["mlp"]),
        "x21": tuple(s(a) for a in w["x21"]),
        "cnn_fc": s(w["cnn_fc"]),
        "head": s(w["head"]),
        "block_regularizers": w["block_regularizers"],
        "spatial": spatial,
        "kernels": kernels,
    }


def shape_plan(config):
    """Per-sample (per-frame for the LSTM model) output shape of every stage, without building."""
    L = layout(config)
    x, r = int(config.use_xconns), int(config.use_resconns)
    (h, w), (h2, w2), (h4, w4) = L["spatial"]
    c1, c2 = L["conv"]
    m1, m2 = L["mlp"]
    a1, a2 = L["x21"]
    plan = {"cnn.input": (L["c_in"], h, w), "mlp.input": (L["n_in"],),
            "cnn.block1": (c1, h, w), "mlp.fc1": (m1,), "cnn.pool1": (c1, h2, w2)}
    for d, (c, m, a, (th, tw), k) in enumerate(zip((c1, c2), (m1, m2), (a1, a2), ((h2, w2), (h4, w4)), L["kernels"]), 1):
        gh, gw = reshape_size((th, tw), k)
        if d == 2:
            plan.update({"cnn.block2": (c, h2, w2), "mlp.fc2": (m,), "cnn.pool2": (c, th, tw)})
        if x:
            plan[f"xconn_12_{d}.dense"] = (gh * gw,)
            plan[f"xconn_12_{d}"] = (c, th, tw)
            plan[f"xconn_21_{d}"] = (a,)
        if r:
            plan[f"resconn_12_{d}.dense"] = (gh * gw,)
            plan[f"resconn_12_{d}"] = (c, th, tw)
            plan[f"resconn_21_{d}"] = (m,)
        plan[f"merge{d}.cnn"] = (c * (1 + x), th, tw)
        plan[f"merge{d}.mlp"] = (m + x * a,)
    plan["cnn.fc"] = (L["cnn_fc"],)
    plan["features"] = (L["cnn_fc"] + m2 + x * a2,)
    plan["lstm" if config.architecture == "cnn_mlp_lstm" else "head.fc"] = (L["head"],)
    plan["logits"] = (config.num_classes,)
    return plan


class XFlowModel(Module):
    """Two-stream classifier; connection sets follow ``config.use_xconns`` / ``use_resconns``."""

    def __init__(self, config):
        self.config = config
        L = self.layout = layout(config)
        init_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
        rng = np.random.default_rng(init_seq)
        drop_rng = np.random.default_rng(drop_seq)
        x, r = config.use_xconns, config.use_resconns
        (h, w), (h2, w2), (h4, w4) = L["spatial"]
        c_in, n_in = L["c_in"], L["n_in"]
        c1, c2 = L["conv"]
        m1, m2 = L["mlp"]
        a1, a2 = L["x21"]
        k1, k2 = L["kernels"]
        reg = L["block_regularizers"]
        n = L["convs_per_block"]

        self.bn_in = BatchNorm(c_in)
        self.conv1 = [Conv2D(c_in if i == 0 else c1, c1, 3, rng) for i in range(n)]
        self.bn1 = BatchNorm(c1) if reg else None
        self.fc1 = Dense(n_in, m1, rng)
        self.bn_fc1 = BatchNorm(m1) if reg else None
        self.xconn_12_1 = XConn1Dto2D(m1, (c1, h2, w2), k1, rng) if x else None
        self.xconn_21_1 = XConn2Dto1D((c1, h2, w2), c1, a1, rng) if x else None
        self.resconn_12_1 = ResConn1Dto2D(n_in, (c1, h2, w2), k1, rng) if r else None
        self.resconn_21_1 = ResConn2Dto1D((c_in, h, w), c1, m1, rng) if r else None

        c1m = c1 * (2 if x else 1)
        # layers fed by a merge keep the baseline inputs as their leading block
        self.conv2 = [Conv2D(c1m, c2, 3, rng, splits=(c1, c1) if x else None)]
        self.conv2 += [Conv2D(c2, c2, 3, rng) for _ in range(n - 1)]
        self.bn2 = BatchNorm(c2) if reg else None
        self.fc2 = Dense(m1 + (a1 if x else 0), m2, rng, splits=(m1, a1) if x else None)
        self.xconn_12_2 = XConn1Dto2D(m2, (c2, h4, w4), k2, rng) if x else None
        self.xconn_21_2 = XConn2Dto1D((c2, h4, w4), c2, a2, rng) if x else None
        self.resconn_12_2 = ResConn1Dto2D(n_in, (c2, h4, w4), k2, rng) if r else None
        self.resconn_21_2 = ResConn2Dto1D((c_in, h, w), c2, m2, rng) if r else None

        c2m = c2 * (2 if x else 1)
        self.cnn_fc = Dense(c2m * h4 * w4, L["cnn_fc"], rng, splits=(c2 * h4 * w4,) * 2 if x else None)
        n_base = L["cnn_fc"] + m2
        n_feat = n_base + (a2 if x else 0)
        feat_splits = (n_base, a2) if x else None
        self.bn_head = BatchNorm(n_feat)
        if config.architecture == "cnn_mlp":
            self.head_fc = Dense(n_feat, L["head"], rng, splits=feat_splits)
            self.lstm = None
        else:
            self.head_fc = None
            self.lstm = LSTM(n_feat, L["head"], rng, output=config.lstm_output, splits=feat_splits)
        self.out = Dense(L["head"], config.num_classes, rng, activation="linear")

        self.pool = MaxPool2D()
        self.drop_conv = Dropout(0.25 if reg else 0.0, drop_rng)
        self.drop_mlp = Dropout(0.5 if reg else 0.0, drop_rng)
        self.drop_merge = Dropout(0.5, drop_rng)
        self.drop_head = Dropout(0.5, drop_rng)
        self._trace = None

    # ------------------------------------------------------------ inputs

    @property
    def n_features(self):
        return self.bn_head.gamma.shape[0]

    def encode_arrays(self, frames, mfcc):
        """Raw clip ([T,H,W] frames, [T,D] MFCCs) -> model inputs (image tensor, MFCC tensor)."""
        cfg = self.config
        frames = np.asarray(frames, dtype=np.float64)
        mfcc = np.asarray(mfcc, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1:] != (cfg.height, cfg.width):
            raise ContractError(f"expected frames [T, {cfg.height}, {cfg.width}], got {frames.shape}")
        if mfcc.ndim != 2 or mfcc.shape[1] != cfg.mfcc_dim:
            raise ContractError(f"expected mfcc [T, {cfg.mfcc_dim}], got {mfcc.shape}")
        if frames.shape[0] != mfcc.shape[0]:
            raise ContractError(f"modality length mismatch: {frames.shape[0]} frames vs {mfcc.shape[0]} mfcc vectors")
        if cfg.architecture == "cnn_mlp_lstm":
            return frames[:, None], mfcc
        if frames.shape[0] < cfg.t_avg:
            raise ContractError(f"clip of {frames.shape[0]} steps is shorter than t_avg={cfg.t_avg}")
        ex = sliding_window_average(Example(frames, mfcc, 0, 0), cfg.t_avg)
        return ex.frames, ex.mfcc.reshape(-1)

    def encode(self, example):
        return self.encode_arrays(example.frames, example.mfcc)

    # ------------------------------------------------------------ graph

    def _record(self, name, v):
        if self._trace is not None:
            self._trace[name] = v.value
        return v

    def _merge(self, d, h, m, img, mfcc):
        def run(kind, src):
            conn = getattr(self, f"{kind}_{d}")
            return [] if conn is None else [self._record(f"{kind}_{d}", conn(src))]

        # every connection reads pre-merge values; 1D->2D feed the CNN, 2D->1D feed the MLP
        cnn_res, cnn_x = run("resconn_12", mfcc), run("xconn_12", m)
        mlp_res, mlp_x = run("resconn_21", img), run("xconn_21", h)
        h = self._record(f"merge{d}.cnn", merge(h, cnn_res, cnn_x))
        m = self._record(f"merge{d}.mlp", merge(m, mlp_res, mlp_x))
        if cnn_res or cnn_x:
            h, m = self.drop_merge(h), self.drop_merge(m)
        return h, m

    def extract(self, img, mfcc):
        """Shared two-stream extractor: img [B, c_in, H, W], mfcc [B, n_in] -> features [B, F]."""
        rec = self._record
        h = self.bn_in(img)
        for conv in self.conv1:
            h = conv(h)
        if self.bn1 is not None:
            h = self.bn1(h)
        rec("cnn.block1", h)
        h = self.drop_conv(rec("cnn.pool1", self.pool(h)))
        m = rec("mlp.fc1", self.fc1(mfcc))
        if self.bn_fc1 is not None:
            m = self.drop_mlp(self.bn_fc1(m))
        h, m = self._merge(1, h, m, img, mfcc)

        for conv in self.conv2:
            h = conv(h)
        if self.bn2 is not None:
            h = self.bn2(h)
        rec("cnn.block2", h)
        h = self.drop_conv(rec("cnn.pool2", self.pool(h)))
        m = rec("mlp.fc2", self.fc2(m))
        h, m = self._merge(2, h, m, img, mfcc)

        h = rec("cnn.fc", self.cnn_fc(ad.flatten(h)))
        return rec("features", ad.concat([h, m], axis=1))

    def logits(self, encoded):
        """Batched forward pass over encoded examples -> logits Var [N, C]."""
        if not encoded:
            raise ContractError("empty batch")
        if self.config.architecture == "cnn_mlp":
            img = ad.constant(np.stack([e[0] for e in encoded]))
            mfcc = ad.constant(np.stack([e[1] for e in encoded]))
            z = self.drop_head(self.bn_head(self.extract(img, mfcc)))
            z = self.drop_head(self._record("head.fc", self.head_fc(z)))
            return self._record("logits", self.out(z))
        lengths = np.array([e[0].shape[0] for e in encoded])
        t_max = int(lengths.max())
        img = ad.constant(np.concatenate([e[0] for e in encoded]))
        mfcc = ad.constant(np.concatenate([e[1] for e in encoded]))
        z = self.drop_head(self.bn_head(self.extract(img, mfcc)))
        rows = np.concatenate([i * t_max + np.arange(t) for i, t in enumerate(lengths)])
        seq = ad.reshape(ad.scatter_rows(z, rows, len(encoded) * t_max), (len(encoded), t_max, z.shape[1]))
        hidden = self._record("lstm", self.lstm(seq, lengths))
        return self._record("logits", self.out(hidden))

    def predict_proba(self, encoded, batch_size=256):
        out = []
        with ad.no_grad():
            for i in range(0, len(encoded), batch_size):
                out.append(np.exp(ad.log_softmax(self.logits(encoded[i:i + batch_size]).value)))
        return np.concatenate(out)

    def forward(self, x_img, x_mfcc):
        """One clip -> class probabilities [C]."""
        return self.predict_proba([self.encode_arrays(x_img, x_mfcc)])[0]

    def trace(self, encoded):
        """Run a no-grad forward pass and return every named intermediate activation (batched)."""
        self._trace = {}
        try:
            with ad.no_grad():
                self.logits(encoded)
            return self._trace
        finally:
            self._trace = None

    def set_dropout(self, enabled):
        for d in (self.drop_conv, self.drop_mlp, self.drop_merge, self.drop_head):
            d.training = enabled and self.training


def build_cnn_mlp(config):
    if config.architecture != "cnn_mlp":
        config = config.replace(architecture="cnn_mlp")
    return XFlowModel(config)


def build_cnn_mlp_lstm(config):
    if config.architecture != "cnn_mlp_lstm":
        config = config.replace(architecture="cnn_mlp_lstm")
    return XFlowModel(config)


def build_model(config):
    return XFlowModel(config)


def forward(model, x_img, x_mfcc):
    return model.forward(x_img, x_mfcc)


def param_count(model):
    return int(sum(p.value.size for p in model.parameters()))


def connection_parameter_names(model):
    return [name for name, _ in model.named_parameters() if name.startswith(CONNECTION_PREFIXES)]


def describe(model):
    """Human-readable architecture summary."""
    cfg = model.config
    flags = f"xconns={'on' if cfg.use_xconns else 'off'} resconns={'on' if cfg.use_resconns else 'off'}"
    lines = [f"{cfg.architecture}  classes={cfg.num_classes}  image={cfg.height}x{cfg.width}  "
             f"mfcc={cfg.mfcc_dim}  {flags}"]
    for name, shape in shape_plan(cfg).items():
        lines.append(f"  {name:<22} {'x'.join(map(str, shape))}")
    lines.append(f"parameters: {param_count(model)}")
    return "\n".join(lines)


def embed_baseline(baseline, xflow):
    """Make ``xflow`` compute exactly what ``baseline`` does on the shared path.

    Every XFlow parameter is zeroed, then each baseline parameter and buffer is
    copied into the leading slice of its same-named XFlow counterpart (widened
    layers only gain trailing inputs). Extra running variances are set to 1.
    """
    src = dict(baseline.named_parameters())
    for name, p in xflow.named_parameters():
        p.value[...] = 0.0
        if name in src:
            p.value[tuple(slice(0, s) for s in src[name].shape)] = src[name].value
    src_buf = dict(baseline.named_buffers())
    for name, buf in xflow.named_buffers():
        buf[...] = 1.0 if name.endswith("running_var") else 0.0
        buf[tuple(slice(0, s) for s in src_buf[name].shape)] = src_buf[name]
    missing = set(src) - {n for n, _ in xflow.named_parameters()}
    if missing:
        raise ContractError(f"baseline parameters without a counterpart: {sorted(missing)}")
    return xflow


def model_grad_check(config, n_examples=3, seed=0, max_coords=None, floor=1e-6):
    """Finite-difference check of every parameter of a freshly built model.

    Batch norm runs on batch statistics, dropout is frozen off. Biases are
    drawn away from zero so no PReLU/ReLU input sits exactly on its kink.
    Returns {parameter name: worst relative error}.
    """
    rng = np.random.default_rng(seed)
    model = build_model(config).train()
    model.set_dropout(False)
    for name, p in model.named_parameters():
        p.name = name
        if name.endswith(".b"):
            p.value[...] = rng.normal(0.0, 0.1, p.shape)
    n_frames = config.t_avg if config.architecture == "cnn_mlp" else 2
    encoded, labels = [], []
    for i in range(n_examples):
        t = n_frames + i % 2
        frames = rng.random((t, config.height, config.width))
        encoded.append(model.encode_arrays(frames, rng.normal(size=(t, config.mfcc_dim))))
        labels.append(i % config.num_classes)

    def loss():
        return ad.softmax_cross_entropy(model.logits(encoded), labels)[0]

    return ad.grad_check_detail(loss, model.parameters(), max_coords=max_coords, seed=seed, floor=floor)


def tiny_config(architecture, use_xconns=True, use_resconns=True, seed=0):
    """The small configuration used for full-model gradient checks."""
    return ModelConfig(architecture=architecture, num_classes=2, height=4, width=4, mfcc_dim=2, t_avg=2,
                       use_xconns=use_xconns, use_resconns=use_resconns, seed=seed, width_mult=0.125)


# ---------------------------------------------------------------- parameter archive

def _state(model):
    return list(model.named_parameters()) + [(n, b) for n, b in model.named_buffers()]


def save_params(model, path):
    """Write parameters then batch-norm buffers in registry order, plus a ``.json`` config sidecar.

    Layout: magic, u32 entry count, then per entry a u32 name length, the
    UTF-8 name and one f64 tensor record.
    """
    path = Path(path)
    state = _state(model)
    chunks = [ARCHIVE_MAGIC, struct.pack("<I", len(state))]
    for name, value in state:
        raw = name.encode("utf-8")
        arr = value.value if isinstance(value, ad.Var) else value
        chunks += [struct.pack("<I", len(raw)), raw, encode_tensor(arr, precision="f64")]
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(model.config.to_dict(), indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")


def read_archive(path):
    """Parse an archive into an ordered list of (name, float64 array)."""
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"bad archive magic {data[:4]!r}", 0, path)
    if len(data) < 8:
        raise FormatError("truncated entry count", 4, path)
    (count,) = struct.unpack_from("<I", data, 4)
    entries, pos = [], 8
    for _ in range(count):
        if len(data) - pos < 4:
            raise FormatError("truncated name length", pos, path)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if len(data) - pos < n:
            raise FormatError(f"truncated name ({n} bytes)", pos, path)
        name = data[pos:pos + n].decode("utf-8", errors="replace")
        arr, pos = decode_tensor(data, pos + n, path)
        entries.append((name, arr))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after {count} entries", pos, path)
    return entries


def load_params_into(model, path):
    entries = dict(read_archive(path))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = list(params) + list(buffers)
    if sorted(entries) != sorted(expected):
        raise ValidationError(f"archive entries do not match model: missing {sorted(set(expected) - set(entries))}, "
                              f"unexpected {sorted(set(entries) - set(expected))}")
    for name, arr in entries.items():
        target = params[name].value if name in params else buffers[name]
        if target.shape != arr.shape:
            raise ValidationError(f"{name}: archive shape {arr.shape} != model shape {target.shape}")
        target[...] = arr
    return model


def load_config(path):
    sidecar = Path(str(path) + ".json")
    try:
        return ModelConfig.from_dict(json.loads(sidecar.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{sidecar}: invalid JSON ({exc})") from exc
    except TypeError as exc:
        raise ValidationError(f"{sidecar}: {exc}") from exc


def load_params(path):
    """Rebuild a model from an archive and its config sidecar."""
    model = build_model(load_config(path))
    load_params_into(model, path)
    return model.eval()
