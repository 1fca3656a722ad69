"""Dataset ingestion, segmentation, normalization, label budgets, synthetic signals.

On-disk layout (documented contract, converters from original archive formats
are out of scope):

    <root>/<class_dir>/<recording>.f32   raw little-endian float32 samples
    <root>/<class_dir>/<recording>.meta  text sidecar: ``key = value`` lines
                                         (sample_rate_hz, label, source_id)

CWRU-style roots use the ten class directories in CWRU_CLASS_DIRS with one
recording per shaft speed. IMS-style roots use one directory per endurance
set (subset1_bearing3, subset1_bearing4, subset2_bearing1) containing
zero-padded 1-based snapshot files ``NNNN.f32`` of exactly 20,480 points;
labels derive from the degradation-start constants, not from sidecars.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

UNLABELED = -1
WINDOW = 1024
SLIDING_RATIO = 0.2


class DatasetError(RuntimeError):
    """Layout or protocol violation in an input dataset."""


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Recording:
    samples: np.ndarray       # 1-D float32
    sample_rate_hz: int
    source_id: str
    class_label: int          # 0-based class index

    def __post_init__(self):
        object.__setattr__(self, "samples",
                           np.ascontiguousarray(self.samples, dtype=np.float32))


@dataclass(frozen=True)
class Segment:
    values: np.ndarray        # (window,)
    label: int                # class index or UNLABELED
    origin: tuple[str, int]   # (source_id, start offset in samples)


@dataclass
class SemiSplit:
    """Disjoint labeled / unlabeled / held-out test partition of segments."""
    labeled: list[Segment]
    unlabeled: list[Segment]
    test: list[Segment]
    seed: int

    def counts(self) -> tuple[int, int, int]:
        return len(self.labeled), len(self.unlabeled), len(self.test)


def segments_matrix(segments: list[Segment]) -> tuple[np.ndarray, np.ndarray]:
    """Stack segments into (N, window) float32 plus an int label vector."""
    if not segments:
        return np.zeros((0, WINDOW), dtype=np.float32), np.zeros(0, dtype=np.int64)
    x = np.stack([s.values for s in segments]).astype(np.float32)
    y = np.array([s.label for s in segments], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# Segmentation and normalization
# ---------------------------------------------------------------------------

def segment_count(length: int, window: int, stride: int) -> int:
    return (length - window) // stride + 1


def sliding_stride(window: int, sliding_ratio: float) -> int:
    if not 0.0 < sliding_ratio <= 1.0:
        raise DatasetError(f"sliding ratio must be in (0, 1], got {sliding_ratio}")
    return max(1, int(window * sliding_ratio))


def _segment_array(samples: np.ndarray, label: int, source_id: str, window: int,
                   stride: int, base_offset: int = 0) -> list[Segment]:
    out = []
    for i in range(segment_count(len(samples), window, stride)):
        start = i * stride
        out.append(Segment(values=samples[start:start + window].copy(),
                           label=label,
                           origin=(source_id, base_offset + start)))
    return out


def segment(rec: Recording, window: int = WINDOW,
            sliding_ratio: float = SLIDING_RATIO) -> list[Segment]:
    """Sliding-window segmentation; stride = floor(window * ratio)."""
    if window > len(rec.samples):
        raise DatasetError(
            f"{rec.source_id}: recording of {len(rec.samples)} samples is shorter "
            f"than the window {window}")
    stride = sliding_stride(window, sliding_ratio)
    return _segment_array(rec.samples, rec.class_label, rec.source_id, window, stride)


def znorm_matrix(x: np.ndarray) -> np.ndarray:
    """Per-row zero-mean unit-variance, std floored at 1e-8."""
    x = np.asarray(x, dtype=np.float32)
    mean = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    std = x.std(axis=-1, keepdims=True, dtype=np.float64)
    return ((x - mean) / np.maximum(std, 1e-8)).astype(np.float32)


def znorm(segments: list[Segment]) -> list[Segment]:
    return [Segment(values=znorm_matrix(s.values[None])[0], label=s.label, origin=s.origin)
            for s in segments]


def shuffle_split(segments: list[Segment], seed: int) -> list[Segment]:
    """Deterministic permutation; the multiset of segments is unchanged."""
    order = RngStream(seed).child("shuffle").permutation(len(segments))
    return [segments[i] for i in order]


# ---------------------------------------------------------------------------
# Label budgets
# ---------------------------------------------------------------------------

def _strip_label(seg: Segment) -> Segment:
    return Segment(values=seg.values, label=UNLABELED, origin=seg.origin)


def label_budget(train: list[Segment], test: list[Segment], n_labeled: int,
                 policy: str = "random", seed: int = 0) -> SemiSplit:
    """Reveal n_labeled training labels; the rest become unlabeled segments.

    random: uniform draw over all training segments (shuffled-first protocol).
    from_end: within each class, label backwards from the chronologically last
    segment (the most confidently labeled ones in a run-to-failure recording);
    the budget is split across classes as evenly as possible, remainder to the
    lowest class indices.
    """
    if not 0 <= n_labeled <= len(train):
        raise DatasetError(f"label budget {n_labeled} outside [0, {len(train)}]")
    picked = np.zeros(len(train), dtype=bool)
    if policy == "random":
        order = RngStream(seed).child("label-budget").permutation(len(train))
        picked[order[:n_labeled]] = True
    elif policy == "from_end":
        labels = sorted({s.label for s in train})
        if UNLABELED in labels:
            raise DatasetError("from_end policy needs ground-truth labels on train segments")
        base, extra = divmod(n_labeled, len(labels))
        for rank, cls in enumerate(labels):
            quota = base + (1 if rank < extra else 0)
            idx = [i for i, s in enumerate(train) if s.label == cls]
            idx.sort(key=lambda i: train[i].origin)
            if quota > len(idx):
                raise DatasetError(f"class {cls} has only {len(idx)} segments, need {quota}")
            for i in idx[len(idx) - quota:]:
                picked[i] = True
    else:
        raise DatasetError(f"unknown label policy {policy!r}")

    labeled = [train[i] for i in range(len(train)) if picked[i]]
    unlabeled = [_strip_label(train[i]) for i in range(len(train)) if not picked[i]]
    return SemiSplit(labeled=labeled, unlabeled=unlabeled, test=list(test), seed=seed)


# ---------------------------------------------------------------------------
# Disk I/O
# ---------------------------------------------------------------------------

def _write_meta(path, values: dict):
    with open(path, "w") as fh:
        for key, value in values.items():
            fh.write(f"{key} = {value}\n")


def _read_meta(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_recording(root, class_dir: str, name: str, rec: Recording):
    directory = os.path.join(root, class_dir)
    os.makedirs(directory, exist_ok=True)
    rec.samples.astype("<f4").tofile(os.path.join(directory, name + ".f32"))
    _write_meta(os.path.join(directory, name + ".meta"),
                {"sample_rate_hz": rec.sample_rate_hz, "label": rec.class_label,
                 "source_id": rec.source_id})


def save_recordings(root, recordings: list[Recording]):
    for rec in recordings:
        write_recording(root, f"class_{rec.class_label}",
                        rec.source_id.replace("/", "_"), rec)


def _read_f32(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f4")


def load_dataset_dir(root) -> list[Recording]:
    """Generic loader for the documented layout; labels come from sidecars."""
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} does not exist")
    recordings = []
    for class_dir in sorted(os.listdir(root)):
        directory = os.path.join(root, class_dir)
        if not os.path.isdir(directory):
            warnings.warn(f"skipping stray file {class_dir!r} in {root}")
            continue
        for name in sorted(os.listdir(directory)):
            if not name.endswith(".f32"):
                if not name.endswith(".meta"):
                    warnings.warn(f"skipping unknown file {class_dir}/{name}")
                continue
            stem = name[:-4]
            meta = _read_meta(os.path.join(directory, stem + ".meta"))
            recordings.append(Recording(
                samples=_read_f32(os.path.join(directory, name)),
                sample_rate_hz=int(meta.get("sample_rate_hz", 0)),
                source_id=meta.get("source_id", f"{class_dir}/{stem}"),
                class_label=int(meta["label"]),
            ))
    if not recordings:
        raise DatasetError(f"no recordings found under {root!r}")
    return recordings


# ---------------------------------------------------------------------------
# CWRU-style dataset: 10 classes, fault location x severity, 3 shaft speeds
# ---------------------------------------------------------------------------

# Directory name -> 0-based class index. Display labels (1..10) follow the
# conventional ordering: ball, inner race, outer race at 7/14/21 mils, normal.
CWRU_CLASS_DIRS = {
    "ball_007": 0, "ball_014": 1, "ball_021": 2,
    "ir_007": 3, "ir_014": 4, "ir_021": 5,
    "or_007": 6, "or_014": 7, "or_021": 8,
    "normal": 9,
}
CWRU_N_CLASSES = 10
CWRU_SPEEDS_RPM = (1730, 1750, 1772)
CWRU_TRAIN_WINDOWS_PER_RECORDING = 430   # 30 recordings x 430 = 12,900
CWRU_TEST_WINDOWS_PER_RECORDING = 30     # 30 recordings x 30  = 900


def cwru_table_label(class_dir: str) -> int:
    """1-based class number as conventionally tabulated."""
    return CWRU_CLASS_DIRS[class_dir] + 1


def load_cwru(root) -> list[Recording]:
    """Load a CWRU-layout root; speeds merge under one label per fault class."""
    if not os.path.isdir(root):
        raise DatasetError(f"CWRU root {root!r} does not exist")
    recordings = []
    for class_dir, label in sorted(CWRU_CLASS_DIRS.items()):
        directory = os.path.join(root, class_dir)
        if not os.path.isdir(directory):
            raise DatasetError(f"missing CWRU class directory {class_dir!r}")
        found = 0
        for name in sorted(os.listdir(directory)):
            if not name.endswith(".f32"):
                if not name.endswith(".meta"):
                    warnings.warn(f"skipping unknown file {class_dir}/{name}")
                continue
            stem = name[:-4]
            meta = _read_meta(os.path.join(directory, stem + ".meta"))
            recordings.append(Recording(
                samples=_read_f32(os.path.join(directory, name)),
                sample_rate_hz=int(meta.get("sample_rate_hz", 12000)),
                source_id=f"{class_dir}/{stem}",
                class_label=label,
            ))
            found += 1
        if found == 0:
            raise DatasetError(f"CWRU class directory {class_dir!r} has no recordings")
    for name in sorted(os.listdir(root)):
        if name not in CWRU_CLASS_DIRS and os.path.isdir(os.path.join(root, name)):
            warnings.warn(f"skipping unknown CWRU directory {name!r}")
    return recordings


def cwru_train_test_segments(
        recordings: list[Recording], window: int = WINDOW,
        sliding_ratio: float = SLIDING_RATIO,
        train_windows: int = CWRU_TRAIN_WINDOWS_PER_RECORDING,
        test_windows: int = CWRU_TEST_WINDOWS_PER_RECORDING,
) -> tuple[list[Segment], list[Segment]]:
    """Contiguous head/tail split per recording with a one-window guard gap.

    Every recording contributes exactly train_windows sliding windows from its
    head and test_windows from a tail region separated by a full window, so
    overlapping windows never straddle the train/test boundary. The defaults
    yield the published 12,900/900 totals on the standard 30-recording layout.
    """
    stride = sliding_stride(window, sliding_ratio)
    train_span = window + (train_windows - 1) * stride
    test_span = window + (test_windows - 1) * stride
    needed = train_span + window + test_span
    train, test = [], []
    for rec in recordings:
        if len(rec.samples) < needed:
            raise DatasetError(
                f"{rec.source_id}: {len(rec.samples)} samples, need {needed} for the "
                f"{train_windows}/{test_windows} split")
        train.extend(_segment_array(rec.samples[:train_span], rec.class_label,
                                    rec.source_id, window, stride))
        test_base = train_span + window
        test.extend(_segment_array(rec.samples[test_base:test_base + test_span],
                                   rec.class_label, rec.source_id, window, stride,
                                   base_offset=test_base))
    return train, test


# ---------------------------------------------------------------------------
# IMS-style dataset: run-to-failure snapshots, 4 classes
# ---------------------------------------------------------------------------

IMS_CLASS_NAMES = ("healthy", "inner_race", "rolling_element", "outer_race")
IMS_N_CLASSES = 4
IMS_POINTS_PER_FILE = 20480
IMS_SAMPLE_RATE_HZ = 20480
IMS_FILES_PER_CLASS = 210
IMS_TEST_FILES_PER_CLASS = 10
IMS_TAIL_FILES_AFTER_START = 15

# Degradation starting points (auto-encoder-correlation estimates) consumed as
# configuration constants; the noisy fourth endurance set is excluded.
IMS_FAULT_SETS = {
    "subset1_bearing3": {"class": 1, "n_files": 2156, "aec_start": 2027},
    "subset1_bearing4": {"class": 2, "n_files": 2156, "aec_start": 1641},
    "subset2_bearing1": {"class": 3, "n_files": 984, "aec_start": 547},
}
IMS_HEALTHY_SET = "subset1_bearing3"


def ims_fault_file_range(set_name: str) -> tuple[int, int]:
    """Inclusive 1-based file range: 210 files ending 15 files after the
    degradation start."""
    info = IMS_FAULT_SETS[set_name]
    end = info["aec_start"] + IMS_TAIL_FILES_AFTER_START
    start = end - IMS_FILES_PER_CLASS + 1
    if start < 1 or end > info["n_files"]:
        raise DatasetError(f"{set_name}: file range {start}..{end} outside 1..{info['n_files']}")
    return start, end


def _load_ims_file(root, set_name: str, index: int) -> np.ndarray:
    path = os.path.join(root, set_name, f"{index:04d}.f32")
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    samples = _read_f32(path)
    if len(samples) != IMS_POINTS_PER_FILE:
        raise DatasetError(f"{path}: {len(samples)} points, expected {IMS_POINTS_PER_FILE}")
    return samples


def load_ims(root, healthy_files: int = IMS_FILES_PER_CLASS) -> list[Recording]:
    """One Recording per selected snapshot file, in chronological order per class.

    healthy_files=210 balances the healthy class with the fault classes;
    pass 110 for the strict first-110-files reading (smaller healthy class).
    """
    if not os.path.isdir(root):
        raise DatasetError(f"IMS root {root!r} does not exist")
    wanted: list[tuple[str, int, int]] = []
    for idx in range(1, healthy_files + 1):
        wanted.append((IMS_HEALTHY_SET, idx, 0))
    for set_name in sorted(IMS_FAULT_SETS):
        start, end = ims_fault_file_range(set_name)
        for idx in range(start, end + 1):
            wanted.append((set_name, idx, IMS_FAULT_SETS[set_name]["class"]))

    recordings, missing = [], []
    for set_name, idx, label in wanted:
        try:
            samples = _load_ims_file(root, set_name, idx)
        except FileNotFoundError:
            missing.append(f"{set_name}/{idx:04d}.f32")
            continue
        recordings.append(Recording(
            samples=samples, sample_rate_hz=IMS_SAMPLE_RATE_HZ,
            source_id=f"{set_name}/{idx:04d}", class_label=label))
    if missing:
        shown = ", ".join(missing[:8]) + (" ..." if len(missing) > 8 else "")
        raise DatasetError(f"IMS root is missing {len(missing)} files: {shown}")
    return recordings


def ims_train_test_segments(
        recordings: list[Recording], window: int = WINDOW,
        test_files_per_class: int = IMS_TEST_FILES_PER_CLASS,
) -> tuple[list[Segment], list[Segment]]:
    """Divide each snapshot file into contiguous windows (20 per file at 1024);
    the chronologically last files of every class are held out for test."""
    by_class: dict[int, list[Recording]] = {}
    for rec in recordings:
        by_class.setdefault(rec.class_label, []).append(rec)
    train, test = [], []
    for label in sorted(by_class):
        files = sorted(by_class[label], key=lambda r: r.source_id)
        if len(files) <= test_files_per_class:
            raise DatasetError(
                f"class {label}: {len(files)} files cannot spare {test_files_per_class} for test")
        for rec in files[:-test_files_per_class]:
            train.extend(segment(rec, window, sliding_ratio=1.0))
        for rec in files[-test_files_per_class:]:
            test.extend(segment(rec, window, sliding_ratio=1.0))
    return train, test


# ---------------------------------------------------------------------------
# Synthetic vibration generator (desk-scale stand-in for both datasets)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Class 0 is band-limited noise; fault classes are periodic impulse trains
    at class-specific repetition rates exciting a decaying resonance."""
    sample_rate_hz: int = 20480
    n_samples: int = 4900          # 20 sliding windows at the 1024/0.2 defaults
    n_classes: int = 4
    impact_rates_hz: tuple = (0.0, 53.0, 87.0, 131.0)
    resonances_hz: tuple = (0.0, 2500.0, 3600.0, 4700.0)
    decay_s: float = 0.0015
    noise_cutoff_hz: float = 5000.0
    snr_db: float = 10.0


def _band_limited_noise(rng: RngStream, n: int, fs: int, cutoff_hz: float) -> np.ndarray:
    white = rng.normal((n,), dtype=np.float64)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spectrum[freqs > cutoff_hz] = 0.0
    out = np.fft.irfft(spectrum, n)
    return out / max(out.std(), 1e-12)


def _impulse_train(rng: RngStream, spec: SynthSpec, class_id: int) -> np.ndarray:
    fs, n = spec.sample_rate_hz, spec.n_samples
    period = fs / spec.impact_rates_hz[class_id]
    burst_len = int(6 * spec.decay_s * fs)
    t = np.arange(burst_len) / fs
    burst = np.exp(-t / spec.decay_s) * np.sin(2 * np.pi * spec.resonances_hz[class_id] * t)
    signal = np.zeros(n + burst_len, dtype=np.float64)
    phase = float(rng.uniform(0.0, 1.0, ()) * period)
    pos = phase
    while pos < n:
        amp = 1.0 + 0.1 * float(rng.normal((), dtype=np.float64))
        start = int(pos)
        signal[start:start + burst_len] += amp * burst
        pos += period
    return signal[:n]


def synth_generate(class_id: int, n_recordings: int, rng: RngStream,
                   spec: SynthSpec = SynthSpec()) -> list[Recording]:
    """Deterministic synthetic recordings for one class."""
    if not 0 <= class_id < spec.n_classes:
        raise DatasetError(f"class {class_id} outside 0..{spec.n_classes - 1}")
    out = []
    for i in range(n_recordings):
        rec_rng = rng.child(f"synth-{class_id}-{i}")
        if spec.impact_rates_hz[class_id] == 0.0:
            samples = _band_limited_noise(rec_rng, spec.n_samples, spec.sample_rate_hz,
                                          spec.noise_cutoff_hz)
        else:
            sig = _impulse_train(rec_rng, spec, class_id)
            noise = _band_limited_noise(rec_rng.child("noise"), spec.n_samples,
                                        spec.sample_rate_hz, spec.noise_cutoff_hz)
            sig_power = float((sig ** 2).mean())
            noise_power = sig_power / (10.0 ** (spec.snr_db / 10.0))
            samples = sig + noise * np.sqrt(noise_power)
        out.append(Recording(samples=samples.astype(np.float32),
                             sample_rate_hz=spec.sample_rate_hz,
                             source_id=f"synth{class_id}_{i:03d}",
                             class_label=class_id))
    return out


def make_synth_split(seed: int, spec: SynthSpec = SynthSpec(),
                     train_recordings: int = 100, test_recordings: int = 10,
                     window: int = WINDOW, sliding_ratio: float = SLIDING_RATIO,
                     ) -> tuple[list[Segment], list[Segment]]:
    """Per class: train and test segments from disjoint recordings.

    Defaults give 4 classes x 100 recordings x 20 windows = 8,000 train and
    4 x 10 x 20 = 800 test segments.
    """
    rng = RngStream(seed).child("synth")
    train, test = [], []
    for cls in range(spec.n_classes):
        recs = synth_generate(cls, train_recordings + test_recordings, rng, spec)
        for rec in recs[:train_recordings]:
            train.extend(segment(rec, window, sliding_ratio))
        for rec in recs[train_recordings:]:
            test.extend(segment(rec, window, sliding_ratio))
    return train, test
