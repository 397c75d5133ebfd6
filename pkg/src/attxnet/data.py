"""Segment datasets, label schemes, the segment archive format and a synthetic
two-modality generator.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import dsp
from .errors import ArchiveError, ConfigurationError

log = logging.getLogger(__name__)

EXCLUDE = -1


class LabelSchemeError(ConfigurationError):
    """A raw label lies outside the scheme's declared domain."""


# --------------------------------------------------------------------------
# label schemes


@dataclass(frozen=True)
class LabelScheme:
    name: str
    class_names: tuple[str, ...]
    mapping: dict = field(default_factory=dict)
    rule: Callable[[str], int] | None = None

    def apply(self, raw_label) -> int:
        key = str(raw_label).strip().lower()
        if self.rule is not None:
            return self.rule(key)
        if key not in self.mapping:
            raise LabelSchemeError(
                f"label {raw_label!r} unknown to scheme {self.name!r}; domain: {sorted(self.mapping)}"
            )
        return self.mapping[key]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _case_arousal(key: str) -> int:
    try:
        rating = float(key)
    except ValueError:
        raise LabelSchemeError(f"CASE arousal label must be a rating in [1, 9], got {key!r}") from None
    if not 1.0 <= rating <= 9.0:
        raise LabelSchemeError(f"CASE arousal rating {rating} outside [1, 9]")
    return 0 if rating < 5.0 else 1


_WESAD_EXTRA = {"meditation": EXCLUDE, "transition": EXCLUDE, "transient": EXCLUDE}

SCHEMES = {
    "wesad-binary": LabelScheme(
        "wesad-binary",
        ("non-stress", "stress"),
        {"neutral": 0, "baseline": 0, "amusement": 0, "stress": 1, **_WESAD_EXTRA},
    ),
    "wesad-3class": LabelScheme(
        "wesad-3class",
        ("neutral", "amusement", "stress"),
        {"neutral": 0, "baseline": 0, "amusement": 1, "stress": 2, **_WESAD_EXTRA},
    ),
    "swell-binary": LabelScheme(
        "swell-binary",
        ("non-stress", "stress"),
        {"neutral": 0, "time_pressure": 1, "interruption": 1, "relaxation": EXCLUDE},
    ),
    "case-arousal": LabelScheme("case-arousal", ("low", "high"), rule=_case_arousal),
    "synthetic": LabelScheme("synthetic", ("0", "1"), {"0": 0, "1": 1}),
}


def get_scheme(name: str) -> LabelScheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ConfigurationError(f"unknown label scheme {name!r}; expected one of {sorted(SCHEMES)}") from None


def apply_label_scheme(scheme: LabelScheme | str, raw_label) -> int:
    """Class index for ``raw_label`` or :data:`EXCLUDE`."""
    if isinstance(scheme, str):
        scheme = get_scheme(scheme)
    return scheme.apply(raw_label)


# --------------------------------------------------------------------------
# dataset


@dataclass
class Sample:
    sample_id: int
    subject: str
    label: int
    segments: dict  # modality -> (channels, length) array


@dataclass
class SegmentDataset:
    samples: list
    class_names: tuple
    modality_names: tuple
    segment_length: int
    sample_rate: float
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.modality_names = tuple(self.modality_names)
        self._arrays: dict = {}

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def subjects(self) -> list[str]:
        return sorted({s.subject for s in self.samples})

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=int)

    @property
    def subject_ids(self) -> np.ndarray:
        return np.array([s.subject for s in self.samples], dtype=object)

    def channels(self, modality: str) -> int:
        return self.samples[0].segments[modality].shape[0]

    def arrays(self, modalities: Sequence[str] | None = None) -> list[np.ndarray]:
        """Stacked ``(N, channels, length)`` array per requested modality."""
        out = []
        for m in modalities or self.modality_names:
            if m not in self._arrays:
                if m not in self.modality_names:
                    raise ConfigurationError(f"dataset has no modality {m!r}; it has {self.modality_names}")
                self._arrays[m] = np.stack([s.segments[m] for s in self.samples])
            out.append(self._arrays[m])
        return out

    def subset(self, indices: Iterable[int]) -> "SegmentDataset":
        idx = list(indices)
        sub = SegmentDataset(
            [self.samples[i] for i in idx],
            self.class_names,
            self.modality_names,
            self.segment_length,
            self.sample_rate,
            dict(self.manifest),
        )
        for m, arr in self._arrays.items():
            sub._arrays[m] = arr[idx]
        return sub

    def by_subjects(self, subjects: Iterable[str]) -> "SegmentDataset":
        keep = set(subjects)
        return self.subset(i for i, s in enumerate(self.samples) if s.subject in keep)

    def validate(self, min_subjects: int = 2) -> "SegmentDataset":
        for s in self.samples:
            if set(s.segments) != set(self.modality_names):
                raise ArchiveError(
                    ArchiveError.INVARIANT,
                    f"sample {s.sample_id} has modalities {sorted(s.segments)}, expected {list(self.modality_names)}",
                )
            for m, seg in s.segments.items():
                if seg.ndim != 2 or seg.shape[1] != self.segment_length:
                    raise ArchiveError(
                        ArchiveError.INVARIANT,
                        f"sample {s.sample_id} modality {m}: shape {seg.shape}, expected (channels, {self.segment_length})",
                    )
            if not 0 <= s.label < self.num_classes:
                raise ArchiveError(ArchiveError.INVARIANT, f"sample {s.sample_id}: label {s.label} out of range")
        if len(self.subjects) < min_subjects:
            raise ArchiveError(
                ArchiveError.INVARIANT,
                f"dataset has {len(self.subjects)} subject(s); leave-one-subject-out needs at least {min_subjects}",
            )
        return self

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.class_names, self.modality_names, self.segment_length, self.sample_rate]).encode())
        for s in self.samples:
            h.update(f"{s.sample_id}|{s.subject}|{s.label}".encode())
            for m in self.modality_names:
                h.update(np.ascontiguousarray(s.segments[m]).tobytes())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# archive format

SEG_MAGIC = b"ATTXSEG\x00"
SEG_VERSION = 1


def _text(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<I", len(raw)) + raw


def save_segments(dataset: SegmentDataset, path) -> None:
    """Write ``(sample_id, subject, label, modality, tensor)`` records plus a manifest."""
    manifest = dict(dataset.manifest)
    manifest.update(
        class_names=list(dataset.class_names),
        modality_names=list(dataset.modality_names),
        segment_length=dataset.segment_length,
        sample_rate=dataset.sample_rate,
    )
    meta = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(SEG_MAGIC)
    buf.write(struct.pack("<II", SEG_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<Q", len(dataset.samples) * len(dataset.modality_names)))
    for s in dataset.samples:
        for m in dataset.modality_names:
            seg = np.ascontiguousarray(s.segments[m], dtype="<f8")
            buf.write(struct.pack("<I", s.sample_id))
            buf.write(_text(s.subject))
            buf.write(struct.pack("<i", s.label))
            buf.write(_text(m))
            buf.write(struct.pack("<I", seg.ndim))
            buf.write(struct.pack(f"<{seg.ndim}I", *seg.shape))
            buf.write(seg.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_segments(path, min_subjects: int = 2) -> SegmentDataset:
    """Read and validate an archive written by :func:`save_segments`."""
    data = Path(path).read_bytes()
    if data[:8] != SEG_MAGIC:
        raise ArchiveError(ArchiveError.BAD_MAGIC, f"{path}: not a segment archive")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ArchiveError(ArchiveError.TRUNCATED, f"{path}: truncated record at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    def text():
        nonlocal pos
        (n,) = take("<I")
        if pos + n > len(data):
            raise ArchiveError(ArchiveError.TRUNCATED, f"{path}: truncated record at byte {pos}")
        s = data[pos : pos + n].decode()
        pos += n
        return s

    version, meta_len = take("<II")
    if version != SEG_VERSION:
        raise ArchiveError(ArchiveError.VERSION, f"{path}: archive version {version}, expected {SEG_VERSION}")
    if pos + meta_len > len(data):
        raise ArchiveError(ArchiveError.TRUNCATED, f"{path}: truncated manifest")
    manifest = json.loads(data[pos : pos + meta_len])
    pos += meta_len
    (count,) = take("<Q")
    samples: OrderedDict[int, Sample] = OrderedDict()
    for _ in range(count):
        (sid,) = take("<I")
        subject = text()
        (label,) = take("<i")
        modality = text()
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape, dtype=int))
        if pos + 8 * n > len(data):
            raise ArchiveError(ArchiveError.TRUNCATED, f"{path}: truncated tensor for sample {sid}")
        seg = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        s = samples.setdefault(sid, Sample(sid, subject, label, {}))
        if s.subject != subject or s.label != label:
            raise ArchiveError(ArchiveError.INVARIANT, f"{path}: sample {sid} has inconsistent subject/label records")
        s.segments[modality] = seg
    if pos != len(data):
        raise ArchiveError(ArchiveError.TRUNCATED, f"{path}: {len(data) - pos} trailing bytes after last record")
    ds = SegmentDataset(
        list(samples.values()),
        manifest.get("class_names", []),
        manifest.get("modality_names", []),
        int(manifest.get("segment_length", 0)),
        float(manifest.get("sample_rate", 0.0)),
        manifest,
    )
    return ds.validate(min_subjects)


# --------------------------------------------------------------------------
# recordings -> segments


def segment_recordings(
    recordings: Sequence[dsp.RawRecording],
    scheme: LabelScheme | str,
    modalities: Sequence[str] | None = None,
    target_rate: float = dsp.TARGET_RATE,
    window_s: float = 10.0,
    overlap: float = 0.6,
    order: int = dsp.DEFAULT_ORDER,
) -> SegmentDataset:
    """Preprocess every subject's recordings and cut labelled windows.

    Raw labels are mapped through ``scheme`` per sample first; the window
    label is then the majority class. Counts of windows dropped for
    excluded/tied labels go into the manifest.
    """
    if isinstance(scheme, str):
        scheme = get_scheme(scheme)
    by_subject: dict[str, dict[str, dsp.RawRecording]] = {}
    for rec in recordings:
        by_subject.setdefault(rec.subject_id, {})[rec.modality] = rec
    if modalities is None:
        modalities = [m for m in dsp.MODALITIES if any(m in recs for recs in by_subject.values())]
    modalities = tuple(modalities)
    samples, per_subject, exclusions = [], {}, {}
    for subject in sorted(by_subject):
        recs = by_subject[subject]
        missing = [m for m in modalities if m not in recs]
        if missing:
            raise ConfigurationError(f"subject {subject} lacks modalities {missing}")
        clean = {m: dsp.preprocess_modality(recs[m], target_rate, order) for m in modalities}
        n = min(x.shape[-1] for x in clean.values())
        labelled = next((recs[m] for m in modalities if recs[m].labels), None)
        if labelled is None:
            raise ConfigurationError(f"subject {subject} has no labelled recording")
        mapped = np.full(len(labelled.samples), EXCLUDE, dtype=int)
        for start, end, raw in labelled.labels:
            mapped[start:end] = scheme.apply(raw)
        track = dsp.resample_labels(mapped, labelled.sample_rate, target_rate)[:n]
        bounds = dsp.window_bounds(n, target_rate, window_s, overlap)
        windows = dsp.window_segments(np.zeros(n), target_rate, window_s, overlap, labels=track)
        for w in windows:
            segs = {m: clean[m][:, w.start : w.stop].copy() for m in modalities}
            samples.append(Sample(len(samples), subject, w.label, segs))
        per_subject[subject] = len(windows)
        exclusions[subject] = len(bounds) - len(windows)
    win = int(round(window_s * target_rate))
    manifest = {
        "label_scheme": scheme.name,
        "segments_per_subject": per_subject,
        "excluded_windows": exclusions,
        "preprocessing": {
            "target_rate": target_rate,
            "window_s": window_s,
            "overlap": overlap,
            "filter_order": order,
            "filters": {m: dsp.MODALITY_FILTERS[m] for m in modalities},
            "eda_phasic_highpass": [dsp.PHASIC_CUTOFF, dsp.PHASIC_ORDER],
            "order_of_operations": "filter@native -> resample -> zscore (-> EDA tonic/phasic)",
        },
    }
    return SegmentDataset(samples, scheme.class_names, modalities, win, target_rate, manifest)


# --------------------------------------------------------------------------
# synthetic generator

SYNTH_RATE = 256.0
SYNTH_SECONDS = 10.0
SLOT_SECONDS = 1.0
F_LOW, F_HIGH = 2.0, 6.0
NOISE = 0.3


def _slot_parity(t: np.ndarray, offset: float) -> np.ndarray:
    return (np.floor((t + offset) / SLOT_SECONDS).astype(int)) % 2


def _chirp(freq: np.ndarray, fs: float, phase0: float) -> np.ndarray:
    return np.sin(phase0 + 2 * np.pi * np.cumsum(freq) / fs)


def synth_generate(
    seed: int,
    n_subjects: int,
    segs_per_subject: int,
    coupling: str = "independent",
    fs: float = SYNTH_RATE,
    seconds: float = SYNTH_SECONDS,
) -> SegmentDataset:
    """Two-modality surrogate data (``A``: tone, ``B``: square envelope).

    ``independent``: the class sets A's tone frequency and B's envelope
    period, so each modality alone suffices.

    ``gated``: time is cut into 1 s slots on a grid with a random offset.
    A alternates between a low and a high tone from slot to slot, B is high
    on every other slot. The class says whether A's high tone falls in B's
    high slots. Each modality on its own is a phase-randomised pattern that
    carries no class information.

    Every subject gets its own amplitude, baseline and tone shift; every
    modality is then z-scored per subject.
    """
    if n_subjects < 2:
        raise ConfigurationError("need at least 2 subjects")
    if coupling not in ("independent", "gated"):
        raise ConfigurationError(f"unknown coupling {coupling!r}")
    rng = np.random.default_rng(seed)
    n = int(round(fs * seconds))
    t = np.arange(n) / fs
    samples = []
    total = n_subjects * segs_per_subject
    labels = np.arange(total) % 2
    rng.shuffle(labels)
    for subj in range(n_subjects):
        amp_a, amp_b = rng.uniform(0.7, 1.3, size=2)
        base_b = rng.uniform(-0.5, 0.5)
        shift = rng.uniform(-0.3, 0.3)
        seg_a, seg_b = [], []
        subj_labels = labels[subj * segs_per_subject : (subj + 1) * segs_per_subject]
        for y in subj_labels:
            phase0 = rng.uniform(0, 2 * np.pi)
            if coupling == "independent":
                freq = np.full(n, (F_LOW if y == 0 else F_HIGH) + shift)
                period = 2.0 if y == 0 else 1.0
                env = ((t + rng.uniform(0, period)) % period < period / 2).astype(float)
            else:
                offset = rng.uniform(0, 2 * SLOT_SECONDS)
                b_parity = int(rng.integers(2))
                a_parity = b_parity if y == 1 else 1 - b_parity
                parity = _slot_parity(t, offset)
                env = (parity == b_parity).astype(float)
                freq = np.where(parity == a_parity, F_HIGH, F_LOW) + shift
            a = amp_a * _chirp(freq, fs, phase0) + NOISE * rng.standard_normal(n)
            b = amp_b * (env - 0.5) + base_b + NOISE * rng.standard_normal(n)
            seg_a.append(a)
            seg_b.append(b)
        seg_a, seg_b = np.array(seg_a), np.array(seg_b)
        seg_a = (seg_a - seg_a.mean()) / seg_a.std()
        seg_b = (seg_b - seg_b.mean()) / seg_b.std()
        for k, y in enumerate(subj_labels):
            segs = {"A": seg_a[k][None, :], "B": seg_b[k][None, :]}
            samples.append(Sample(len(samples), f"S{subj + 1:02d}", int(y), segs))
    manifest = {
        "label_scheme": "synthetic",
        "synthetic": {
            "seed": seed,
            "n_subjects": n_subjects,
            "segs_per_subject": segs_per_subject,
            "coupling": coupling,
            "sample_rate": fs,
            "seconds": seconds,
        },
        "segments_per_subject": dict(Counter(s.subject for s in samples)),
        "excluded_windows": {},
    }
    return SegmentDataset(samples, ("0", "1"), ("A", "B"), n, fs, manifest)
