"""Signal preprocessing: Butterworth design, zero-phase filtering, resampling,
z-scoring, EDA decomposition, windowing, and raw recording I/O.
"""

from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .errors import ConfigurationError

log = logging.getLogger(__name__)

MODALITIES = ("ECG", "EDA", "BVP", "RESP", "ST")
TARGET_RATE = 256.0
DEFAULT_ORDER = 4
PHASIC_CUTOFF = 0.05
PHASIC_ORDER = 2
POLE_RADIUS_LIMIT = 1.0 - 1e-9


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    cutoff_hz: tuple[float, ...]
    sample_rate: float
    order: int = DEFAULT_ORDER

    def __post_init__(self):
        cut = self.cutoff_hz if isinstance(self.cutoff_hz, (tuple, list)) else (self.cutoff_hz,)
        object.__setattr__(self, "cutoff_hz", tuple(float(c) for c in cut))

    def validate(self) -> None:
        if self.kind not in ("lowpass", "highpass", "bandpass"):
            raise ConfigurationError(f"unknown filter kind {self.kind!r}")
        if self.order < 1:
            raise ConfigurationError(f"filter order must be >= 1, got {self.order}")
        want = 2 if self.kind == "bandpass" else 1
        if len(self.cutoff_hz) != want:
            raise ConfigurationError(f"{self.kind} needs {want} cutoff(s), got {self.cutoff_hz}")
        nyq = self.sample_rate / 2.0
        for c in self.cutoff_hz:
            if not 0.0 < c < nyq:
                raise ConfigurationError(
                    f"cutoff {c} Hz must lie strictly inside (0, Nyquist = {nyq} Hz) at fs = {self.sample_rate} Hz"
                )
        if self.kind == "bandpass" and not self.cutoff_hz[0] < self.cutoff_hz[1]:
            raise ConfigurationError(f"bandpass low edge must be below high edge, got {self.cutoff_hz}")


# per-modality filter chain: list of (kind, cutoffs)
MODALITY_FILTERS = {
    "ECG": [("bandpass", (5.0, 15.0))],
    "EDA": [("lowpass", (3.0,))],
    "BVP": [("bandpass", (0.5, 8.0))],
    "RESP": [("bandpass", (0.1, 0.35))],
    "ST": [("highpass", (0.0001,)), ("lowpass", (10.0,))],
}


# --------------------------------------------------------------------------
# Butterworth design


def _prewarp(f: float, fs: float) -> float:
    return 2.0 * fs * math.tan(math.pi * f / fs)


def _analog_prototype(order: int) -> np.ndarray:
    k = np.arange(order)
    return np.exp(1j * np.pi * (2 * k + order + 1) / (2 * order))


def _pair_sections(zeros: np.ndarray, poles: np.ndarray, gain: float) -> np.ndarray:
    """Group conjugate poles into biquads; zeros are all real (+1 or -1)."""
    upper = sorted((p for p in poles if p.imag > 1e-14), key=lambda p: -abs(p))
    reals = sorted((p.real for p in poles if abs(p.imag) <= 1e-14), key=lambda r: -abs(r))
    pole_groups = [(p, p.conjugate()) for p in upper]
    while reals:
        pole_groups.append(tuple(reals[:2]))
        reals = reals[2:]
    zs = sorted(zeros.real.tolist())
    # give each section one zero from each end of the sorted list so bandpass
    # sections get (z - 1)(z + 1)
    zero_groups = []
    while zs:
        if len(zs) >= 2:
            zero_groups.append((zs.pop(0), zs.pop(-1)))
        else:
            zero_groups.append((zs.pop(),))
    sos = np.zeros((len(pole_groups), 6))
    for i, pg in enumerate(pole_groups):
        den = np.real(np.poly(pg))
        zg = zero_groups[i] if i < len(zero_groups) else ()
        num = np.real(np.poly(zg)) if zg else np.array([1.0])
        sos[i, : len(num)] = num
        sos[i, 3 : 3 + len(den)] = den
    sos[0, :3] *= gain
    return sos


def butterworth_zpk(spec: FilterSpec) -> tuple[np.ndarray, np.ndarray, float]:
    """Digital zeros, poles and gain via prewarped bilinear transform."""
    spec.validate()
    fs, n = spec.sample_rate, spec.order
    proto = _analog_prototype(n)
    if spec.kind == "lowpass":
        wc = _prewarp(spec.cutoff_hz[0], fs)
        za, pa, ka = np.array([]), proto * wc, wc**n
    elif spec.kind == "highpass":
        wc = _prewarp(spec.cutoff_hz[0], fs)
        za, pa, ka = np.zeros(n), wc / proto, 1.0
    else:
        w1, w2 = (_prewarp(c, fs) for c in spec.cutoff_hz)
        w0, bw = math.sqrt(w1 * w2), w2 - w1
        disc = np.sqrt((proto * bw) ** 2 - 4 * w0**2 + 0j)
        pa = np.concatenate([(proto * bw + disc) / 2, (proto * bw - disc) / 2])
        za, ka = np.zeros(n), bw**n
    fs2 = 2.0 * fs
    zd = (fs2 + za) / (fs2 - za)
    pd = (fs2 + pa) / (fs2 - pa)
    zd = np.concatenate([zd, -np.ones(len(pa) - len(za))])
    kd = float(np.real(ka * np.prod(fs2 - za) / np.prod(fs2 - pa)))
    return zd, pd, kd


def design_butterworth(spec: FilterSpec) -> np.ndarray:
    """Second-order sections ``(n_sections, 6)`` rows ``[b0 b1 b2 a0 a1 a2]``."""
    z, p, k = butterworth_zpk(spec)
    return _pair_sections(z, p, k)


def max_pole_radius(sos: np.ndarray) -> float:
    r = 0.0
    for sec in sos:
        r = max(r, float(np.max(np.abs(np.roots(sec[3:]))) if np.any(sec[4:]) else 0.0))
    return r


def frequency_response(sos: np.ndarray, freqs, fs: float) -> np.ndarray:
    """Complex response of the cascade at ``freqs`` (Hz)."""
    z1 = np.exp(-2j * np.pi * np.asarray(freqs, dtype=float) / fs)
    h = np.ones_like(z1)
    for b0, b1, b2, a0, a1, a2 in sos:
        h = h * (b0 + b1 * z1 + b2 * z1 * z1) / (a0 + a1 * z1 + a2 * z1 * z1)
    return h


def filter_order(sos: np.ndarray) -> int:
    return int(sum(2 if abs(sec[5]) > 0 else 1 for sec in sos))


def filter_signal(sos: np.ndarray, x) -> np.ndarray:
    """Zero-phase forward-backward filtering with odd-reflection edge padding.

    Sections whose pole time constant exceeds the signal length (the ST
    highpass) never settle inside a short pad, and edge-matched initial
    states then leave a slow offset across the whole record. Those sections
    run with Gustafsson's initial conditions instead. The cascade is LTI, so
    the order of sections does not matter.
    """
    x = np.asarray(x, dtype=float)
    sos = np.atleast_2d(sos)
    n = x.shape[-1]
    padlen = 3 * filter_order(sos)
    if n <= padlen:
        raise ConfigurationError(f"signal of length {n} too short to filter; need more than {padlen} samples")
    radius = np.array([np.abs(np.roots(s[3:])).max() for s in sos])
    slow = 1.0 / np.maximum(1.0 - radius, 1e-300) > n
    if (~slow).any():
        fast = sos[~slow]
        x = sps.sosfiltfilt(fast, x, axis=-1, padtype="odd", padlen=3 * filter_order(fast))
    for s in sos[slow]:
        x = sps.filtfilt(s[:3], s[3:], x, axis=-1, method="gust")
    return x


def modality_filter(modality: str, fs: float, order: int = DEFAULT_ORDER) -> np.ndarray:
    """Cascade for one modality at its native rate.

    The ST highpass edge sits so close to DC that its poles can hug the unit
    circle; if any exceeds ``POLE_RADIUS_LIMIT`` it is dropped and only the
    lowpass remains.
    """
    if modality not in MODALITY_FILTERS:
        raise ConfigurationError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    parts = []
    for kind, cut in MODALITY_FILTERS[modality]:
        sos = design_butterworth(FilterSpec(kind, cut, fs, order))
        if kind == "highpass" and max_pole_radius(sos) > POLE_RADIUS_LIMIT:
            log.warning("%s highpass at %s Hz ill-conditioned at fs=%s; using lowpass only", modality, cut, fs)
            continue
        parts.append(sos)
    return np.vstack(parts)


# --------------------------------------------------------------------------
# normalization, resampling, decomposition


def zscore(x) -> np.ndarray:
    """Population z-score along the last axis; a flat signal maps to zeros."""
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    safe = np.where(sd < 1e-12, 1.0, sd)
    return np.where(sd < 1e-12, 0.0, (x - mu) / safe)


def resample(x, fs_in: float, fs_out: float) -> np.ndarray:
    """Polyphase rational resampling, anti-aliased at 0.9 x the lower Nyquist.

    Output length is ``round(len(x) * fs_out / fs_in)``.
    """
    if fs_in <= 0 or fs_out <= 0:
        raise ConfigurationError("sample rates must be positive")
    x = np.asarray(x, dtype=float)
    if fs_in == fs_out:
        return x.copy()
    ratio = Fraction(fs_out / fs_in).limit_denominator(10000)
    up, down = ratio.numerator, ratio.denominator
    half = 10 * max(up, down)
    taps = sps.firwin(2 * half + 1, 0.9 * min(fs_in, fs_out) / 2.0, fs=fs_in * up, window=("kaiser", 5.0)) * up
    y = sps.resample_poly(x, up, down, axis=-1, window=taps)
    n_out = int(round(x.shape[-1] * fs_out / fs_in))
    if y.shape[-1] >= n_out:
        return y[..., :n_out]
    pad = [(0, 0)] * (y.ndim - 1) + [(0, n_out - y.shape[-1])]
    return np.pad(y, pad, mode="edge")


def decompose_eda(x, fs: float, cutoff: float = PHASIC_CUTOFF, order: int = PHASIC_ORDER) -> np.ndarray:
    """``[tonic, phasic]``: phasic is the highpassed signal, tonic the remainder."""
    x = np.asarray(x, dtype=float)
    phasic = filter_signal(design_butterworth(FilterSpec("highpass", cutoff, fs, order)), x)
    return np.stack([x - phasic, phasic])


@dataclass
class RawRecording:
    subject_id: str
    modality: str
    sample_rate: float
    samples: np.ndarray
    labels: list = field(default_factory=list)  # (start, end, raw_label), end exclusive

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        n = len(self.samples)
        prev_end = 0
        for start, end, _ in sorted(self.labels, key=lambda t: t[0]):
            if not 0 <= start < end <= n:
                raise ConfigurationError(f"label interval [{start}, {end}) outside recording of length {n}")
            if start < prev_end:
                raise ConfigurationError(f"overlapping label intervals at sample {start}")
            prev_end = end

    def label_array(self) -> np.ndarray:
        """Per-sample raw labels (``None`` where unlabeled)."""
        out = np.full(len(self.samples), None, dtype=object)
        for start, end, lab in self.labels:
            out[start:end] = lab
        return out


def preprocess_modality(
    raw: RawRecording, target_rate: float = TARGET_RATE, order: int = DEFAULT_ORDER
) -> np.ndarray:
    """Filter at the native rate, resample, z-score; returns ``(channels, n)``.

    EDA comes back as two channels, tonic and phasic. The signal is centred
    before filtering; the z-score discards the offset anyway, and the ST
    highpass sits so near DC that a large offset leaves an edge residue.
    """
    sos = modality_filter(raw.modality, raw.sample_rate, order)
    x = np.asarray(raw.samples, dtype=float)
    x = filter_signal(sos, x - x.mean())
    x = zscore(resample(x, raw.sample_rate, target_rate))
    if raw.modality == "EDA":
        return decompose_eda(x, target_rate)
    return x[None, :]


def resample_labels(labels: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Nearest-sample label track at the new rate."""
    n_out = int(round(len(labels) * fs_out / fs_in))
    idx = np.minimum((np.arange(n_out) * fs_in / fs_out).round().astype(int), len(labels) - 1)
    return labels[idx]


# --------------------------------------------------------------------------
# windowing


@dataclass(frozen=True)
class Window:
    start: int
    stop: int
    label: int | None


def window_bounds(n: int, fs: float, window_s: float = 10.0, overlap: float = 0.6) -> list[tuple[int, int]]:
    win = int(round(window_s * fs))
    hop = int(round(window_s * (1.0 - overlap) * fs))
    if hop < 1:
        raise ConfigurationError(f"overlap {overlap} leaves no hop between windows")
    if n < win:
        return []
    return [(s, s + win) for s in range(0, n - win + 1, hop)]


def majority_label(labels: np.ndarray, exclude=-1):
    """Most frequent label, or ``None`` on a tie or when it is ``exclude``."""
    vals, counts = np.unique(labels, return_counts=True)
    top = counts.max()
    winners = vals[counts == top]
    if len(winners) != 1 or winners[0] == exclude:
        return None
    return int(winners[0])


def window_segments(
    x, fs: float, window_s: float = 10.0, overlap: float = 0.6, labels=None
) -> list[Window]:
    """Fixed windows over the last axis of ``x``.

    With ``labels`` (per-sample class indices, -1 = excluded) each window takes
    the majority label and is dropped on ties or an excluded majority.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    bounds = window_bounds(n, fs, window_s, overlap)
    if not bounds:
        warnings.warn(f"signal of {n} samples shorter than one {window_s}s window at {fs} Hz", stacklevel=2)
        return []
    out = []
    for start, stop in bounds:
        if labels is None:
            out.append(Window(start, stop, None))
            continue
        lab = majority_label(np.asarray(labels[start:stop]))
        if lab is not None:
            out.append(Window(start, stop, lab))
    return out


# --------------------------------------------------------------------------
# raw recording files

REC_MAGIC = b"ATTXREC\x00"
REC_VERSION = 1


class RecordingFormatError(ValueError):
    """A raw recording file does not follow the expected layout."""


def write_recording_csv(rec: RawRecording, path) -> None:
    """Header row, value row, then ``value[,raw_label]`` per sample."""
    labels = rec.label_array()
    with open(path, "w") as fh:
        fh.write("subject_id,modality,sample_rate\n")
        fh.write(f"{rec.subject_id},{rec.modality},{rec.sample_rate!r}\n")
        for v, lab in zip(rec.samples, labels):
            fh.write(f"{float(v)!r}\n" if lab is None else f"{float(v)!r},{lab}\n")


def _intervals(raw_labels: list) -> list[tuple[int, int, str]]:
    out = []
    start = None
    for i, lab in enumerate(raw_labels + [None]):
        if start is not None and lab != raw_labels[start]:
            out.append((start, i, raw_labels[start]))
            start = None
        if start is None and lab is not None:
            start = i
    return out


def read_recording_csv(path) -> RawRecording:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise RecordingFormatError(f"{path}: no records")
    header = [h.strip() for h in lines[0].split(",")]
    if header != ["subject_id", "modality", "sample_rate"]:
        raise RecordingFormatError(f"{path}: header must be 'subject_id,modality,sample_rate', got {lines[0]!r}")
    if len(lines) < 3:
        raise RecordingFormatError(f"{path}: no records")
    meta = [v.strip() for v in lines[1].split(",")]
    if len(meta) != 3:
        raise RecordingFormatError(f"{path}: line 2 must hold subject_id, modality, sample_rate")
    subject, modality, rate = meta
    if modality not in MODALITIES:
        raise RecordingFormatError(f"{path}: unknown modality {modality!r}; expected one of {MODALITIES}")
    try:
        rate = float(rate)
    except ValueError:
        raise RecordingFormatError(f"{path}: bad sample_rate {rate!r}") from None
    values, raw_labels = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",", 1)
        try:
            values.append(float(parts[0]))
        except ValueError:
            raise RecordingFormatError(f"{path}:{lineno}: bad sample value {parts[0]!r}") from None
        raw_labels.append(parts[1].strip() if len(parts) > 1 and parts[1].strip() else None)
    if not values:
        raise RecordingFormatError(f"{path}: no records")
    return RawRecording(subject, modality, rate, np.array(values), _intervals(raw_labels))


def write_recording_bin(rec: RawRecording, path) -> None:
    """Magic, version, subject/modality strings, rate, samples, label intervals (LE)."""
    def text(s):
        raw = str(s).encode()
        return struct.pack("<I", len(raw)) + raw

    buf = bytearray(REC_MAGIC)
    buf += struct.pack("<I", REC_VERSION)
    buf += text(rec.subject_id) + text(rec.modality)
    buf += struct.pack("<dQ", rec.sample_rate, len(rec.samples))
    buf += np.ascontiguousarray(rec.samples, dtype="<f8").tobytes()
    buf += struct.pack("<I", len(rec.labels))
    for start, end, lab in rec.labels:
        buf += struct.pack("<QQ", start, end) + text(lab)
    Path(path).write_bytes(bytes(buf))


def read_recording_bin(path) -> RawRecording:
    data = Path(path).read_bytes()
    if data[:8] != REC_MAGIC:
        raise RecordingFormatError(f"{path}: not a packed recording")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise RecordingFormatError(f"{path}: truncated recording")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    def text():
        nonlocal pos
        (n,) = take("<I")
        s = data[pos : pos + n].decode()
        pos += n
        return s

    (version,) = take("<I")
    if version != REC_VERSION:
        raise RecordingFormatError(f"{path}: recording version {version}, expected {REC_VERSION}")
    subject, modality = text(), text()
    if modality not in MODALITIES:
        raise RecordingFormatError(f"{path}: unknown modality {modality!r}; expected one of {MODALITIES}")
    rate, n = take("<dQ")
    if n == 0:
        raise RecordingFormatError(f"{path}: no records")
    if pos + 8 * n > len(data):
        raise RecordingFormatError(f"{path}: truncated recording")
    samples = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(float)
    pos += 8 * n
    (count,) = take("<I")
    labels = []
    for _ in range(count):
        start, end = take("<QQ")
        labels.append((start, end, text()))
    return RawRecording(subject, modality, rate, samples, labels)


def read_recording(path) -> RawRecording:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == REC_MAGIC:
        return read_recording_bin(path)
    try:
        return read_recording_csv(path)
    except UnicodeDecodeError:
        raise RecordingFormatError(f"{path}: neither CSV nor packed recording") from None
