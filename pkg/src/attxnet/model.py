"""Multimodal pipeline: per-modality encoders, AttX blocks, FC heads, classifier."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attx import AttXBlock, ConnectionType, DimensionAdapter, format_stages
from .encoders import KINDS, N_STAGES, EncoderStack, block_specs, min_input_length, stage_lengths
from .errors import ArchiveError, ConfigurationError
from .numerics import Tensor

ATTX_STAGES = (1, 2, 3)
FC_PROFILES = {"wesad": (512, 256), "swell": (512, 256), "case": (256, 64)}


@dataclass
class PipelineConfig:
    modalities: tuple[str, ...] = ("ECG", "EDA")
    encoder: str = "vgg"
    attx_stages: frozenset = field(default_factory=frozenset)
    connection_type: ConnectionType | None = None
    fc_widths: tuple[int, int] = (512, 256)
    num_classes: int = 2
    loss: str = "cross_entropy"
    focal_alpha: float = 4.0
    focal_gamma: float = 2.0
    seed: int = 0
    segment_length: int = 2560
    modality_channels: tuple[int, ...] | None = None
    width: float = 1.0
    padding: str | None = None
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.attx_stages = frozenset(int(s) for s in self.attx_stages)
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        if isinstance(self.connection_type, str):
            self.connection_type = ConnectionType.parse(self.connection_type)
        if self.modality_channels is None:
            self.modality_channels = (1,) * len(self.modalities)
        self.modality_channels = tuple(int(c) for c in self.modality_channels)

    def validate(self) -> "PipelineConfig":
        if not self.modalities:
            raise ConfigurationError("at least one modality is required")
        if len(self.modality_channels) != len(self.modalities):
            raise ConfigurationError("modality_channels must list one count per modality")
        if self.encoder not in KINDS:
            raise ConfigurationError(f"unknown encoder {self.encoder!r}; expected one of {KINDS}")
        bad = sorted(s for s in self.attx_stages if s not in ATTX_STAGES)
        if bad:
            raise ConfigurationError(f"AttX insertable at stages 1-3 only; got {bad}")
        if self.attx_stages:
            if len(self.modalities) < 2:
                raise ConfigurationError("AttX stages need at least two modalities")
            if self.connection_type is None:
                raise ConfigurationError("attx_stages given without a connection_type")
            self.connection_type.validate(len(self.modalities))
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.fc_widths) != 2 or min(self.fc_widths) < 1:
            raise ConfigurationError(f"fc_widths must be two positive ints, got {self.fc_widths}")
        if self.loss not in ("focal", "cross_entropy"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        need = min_input_length(self.encoder, self.width, self.padding)
        if self.segment_length < need:
            raise ConfigurationError(
                f"segment length {self.segment_length} below the {self.encoder} minimum input length {need}"
            )
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["modality_channels"] = list(self.modality_channels)
        d["attx_stages"] = sorted(self.attx_stages)
        d["fc_widths"] = list(self.fc_widths)
        d["connection_type"] = str(self.connection_type) if self.connection_type else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown pipeline keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def type_label(self) -> str:
        return str(self.connection_type) if self.attx_stages else "none"

    @property
    def stages_label(self) -> str:
        return format_stages(self.attx_stages)


# --------------------------------------------------------------------------
# losses


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (logits.shape[0],):
        raise ConfigurationError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigurationError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = _check_labels(logits, labels)
    logp = nx.pick(nx.log_softmax(logits, axis=1), labels)
    return nx.mean(nx.neg(logp))


def focal_loss(logits: Tensor, labels, alpha: float = 4.0, gamma: float = 2.0) -> Tensor:
    """Batch mean of ``-alpha * (1 - p_t) ** gamma * log(p_t)``."""
    labels = _check_labels(logits, labels)
    logp = nx.pick(nx.log_softmax(logits, axis=1), labels)
    modulator = nx.power(nx.sub(1.0, nx.exp(logp)), gamma)
    return nx.mean(nx.mul(nx.mul(modulator, logp), -float(alpha)))


def loss_for(config: PipelineConfig):
    if config.loss == "focal":
        return lambda logits, labels: focal_loss(logits, labels, config.focal_alpha, config.focal_gamma)
    return cross_entropy_loss


# --------------------------------------------------------------------------
# the model


class Branch:
    """Encoder stack plus its two FC layers for one modality."""

    def __init__(self, name: str, encoder: EncoderStack, flat: int, fc_widths, rng):
        self.name = name
        self.encoder = encoder
        f1, f2 = fc_widths
        self.w1 = nx.glorot_uniform(rng, (flat, f1), flat, f1, name=f"{name}.fc1.weight")
        self.b1 = nx.zeros(f1, requires_grad=True, name=f"{name}.fc1.bias")
        self.w2 = nx.glorot_uniform(rng, (f1, f2), f1, f2, name=f"{name}.fc2.weight")
        self.b2 = nx.zeros(f2, requires_grad=True, name=f"{name}.fc2.bias")

    def parameters(self):
        return self.encoder.parameters() + [self.w1, self.b1, self.w2, self.b2]

    def head(self, x: Tensor) -> Tensor:
        h = nx.relu(nx.dense(nx.flatten(x), self.w1, self.b1))
        return nx.relu(nx.dense(h, self.w2, self.b2))


class Model:
    """Built from a validated :class:`PipelineConfig`; see :func:`build_pipeline`."""

    def __init__(self, config: PipelineConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = len(config.modalities)
        specs = block_specs(config.encoder, config.width, config.padding)
        lengths = stage_lengths(specs, config.segment_length)
        ctype = config.connection_type

        channels = list(config.modality_channels)
        in_channels = [[] for _ in range(d)]
        self.adapters: dict[int, DimensionAdapter] = {}
        self.attx: dict[int, AttXBlock] = {}
        for stage in range(1, N_STAGES + 1):
            for i in range(d):
                in_channels[i].append(channels[i])
            out = specs[stage - 1].out_channels
            shapes = [(out, lengths[stage - 1])] * d
            if stage in config.attx_stages:
                adapter = DimensionAdapter(shapes, rng, name=f"adapt{stage}.")
                if not adapter.is_identity:
                    self.adapters[stage] = adapter
                self.attx[stage] = AttXBlock(d, adapter.m, ctype, stage, rng)
                channels = [adapter.n * (1 + ctype.indegree(i)) for i in range(d)]
            else:
                channels = [out] * d
        self.branches = []
        for i, name in enumerate(config.modalities):
            enc = EncoderStack(specs, in_channels[i], rng, name=name)
            flat = specs[-1].out_channels * lengths[-1]
            self.branches.append(Branch(name, enc, flat, config.fc_widths, rng))
        merged = config.fc_widths[1] * d
        self.cls_w = nx.glorot_uniform(rng, (merged, config.num_classes), merged, config.num_classes, name="classifier.weight")
        self.cls_b = nx.zeros(config.num_classes, requires_grad=True, name="classifier.bias")
        self.stage_lengths = lengths
        self.in_channels = in_channels
        for bn in self.batchnorms():
            bn.momentum, bn.eps = config.bn_momentum, config.bn_eps

    @property
    def embedding_size(self) -> int:
        return self.config.fc_widths[1] * len(self.branches)

    def parameters(self) -> list[Tensor]:
        ps = []
        for b in self.branches:
            ps += b.parameters()
        for stage in sorted(self.attx):
            if stage in self.adapters:
                ps += self.adapters[stage].parameters()
            ps += self.attx[stage].parameters()
        return ps + [self.cls_w, self.cls_b]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def batchnorms(self):
        return [bn for b in self.branches for bn in b.encoder.batchnorms()]

    def _inputs(self, inputs) -> list[Tensor]:
        if len(inputs) != len(self.branches):
            raise ConfigurationError(f"model expects {len(self.branches)} modalities, got {len(inputs)}")
        out = []
        for x in inputs:
            t = x if isinstance(x, Tensor) else Tensor(x)
            if t.ndim == 2:
                t = nx.reshape(t, (1,) + t.shape)
            out.append(t)
        return out

    def embed(self, inputs, mode: str = "train", taps: dict | None = None) -> Tensor:
        """Merged FC output (concatenated fc2 activations of every branch)."""
        xs = self._inputs(inputs)
        for stage in range(1, N_STAGES + 1):
            zs = [b.encoder.forward_stage(stage, x, mode) for b, x in zip(self.branches, xs)]
            if taps is not None:
                taps[f"stage{stage}"] = zs
            if stage in self.attx:
                if stage in self.adapters:
                    zs = self.adapters[stage](zs)
                zs = self.attx[stage](zs)
            xs = zs
        heads = [b.head(x) for b, x in zip(self.branches, xs)]
        if taps is not None:
            taps["heads"] = heads
        return nx.concat(heads, axis=1)

    def forward(self, inputs, mode: str = "train", taps: dict | None = None) -> Tensor:
        return nx.dense(self.embed(inputs, mode, taps), self.cls_w, self.cls_b)

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        for bn in self.batchnorms():
            if bn.stats.initialized:
                arrays[f"{bn.name}.running_mean"] = bn.stats.mean
                arrays[f"{bn.name}.running_var"] = bn.stats.var
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in arrays:
                raise ConfigurationError(f"missing parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ConfigurationError(f"parameter {name!r}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        for bn in self.batchnorms():
            key = f"{bn.name}.running_mean"
            if key in arrays:
                bn.stats.mean = np.array(arrays[key])
                bn.stats.var = np.array(arrays[f"{bn.name}.running_var"])
            else:
                bn.stats.mean = bn.stats.var = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}


def build_pipeline(config: PipelineConfig) -> Model:
    return Model(config)


def predict_proba(model: Model, inputs, batch_size: int = 64, mode: str = "eval") -> np.ndarray:
    n = inputs[0].shape[0]
    out = []
    with nx.no_grad():
        for start in range(0, n, batch_size):
            batch = [x[start : start + batch_size] for x in inputs]
            out.append(nx.softmax(model.forward(batch, mode), axis=1).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"ATTXCKPT"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Header, JSON config, then ``(name, shape, float64 LE values)`` records."""
    arrays = model.state_arrays()
    meta = json.dumps({"config": model.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Model, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ArchiveError(ArchiveError.BAD_MAGIC, f"{path}: not a model checkpoint")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ArchiveError(ArchiveError.TRUNCATED, f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != CKPT_VERSION:
        raise ArchiveError(ArchiveError.VERSION, f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    meta = json.loads(data[pos : pos + meta_len])
    pos += meta_len
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape, dtype=int))
        if pos + 8 * n > len(data):
            raise ArchiveError(ArchiveError.TRUNCATED, f"{path}: truncated checkpoint")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    model = Model(PipelineConfig.from_dict(meta["config"]))
    model.load_state_arrays(arrays)
    return model, meta.get("extra", {})


# --------------------------------------------------------------------------
# embeddings


def export_embeddings(model: Model, dataset, path=None, batch_size: int = 64) -> list[tuple]:
    """Eval-mode merged FC vectors, one row per sample; optionally written as CSV."""
    inputs = dataset.arrays(model.config.modalities)
    rows = []
    with nx.no_grad():
        for start in range(0, len(dataset), batch_size):
            emb = model.embed([x[start : start + batch_size] for x in inputs], mode="eval").data
            for j, vec in enumerate(emb):
                s = dataset.samples[start + j]
                rows.append((s.sample_id, s.subject, s.label, vec))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "subject", "label"] + [f"e{k}" for k in range(model.embedding_size)])
            for sid, subj, label, vec in rows:
                w.writerow([sid, subj, label] + [repr(float(v)) for v in vec])
    return rows
