"""Per-device traffic ingestion, normalization, and split synthesis.

Each device contributes one benign CSV and one CSV per attack type, all with
the same 115 statistical traffic features. The pipeline selects seeded
train/eval/test splits, computes global min-max stats over the train rows of
every device (never eval or test rows), scales everything with those stats,
and can persist the result as a flat binary plus a text manifest.

A synthetic corpus generator provides a drop-in substitute for the real
multi-gigabyte download so the full pipeline stays testable offline.
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from fedanom.errors import DataError

FEATURE_COUNT = 115
TRAIN_ROWS = 5000
EVAL_ROWS = 3000
ATTACK_SAMPLE_ROWS = 500

MAGIC = b"FDDS"
FORMAT_VERSION = 1


def _as_matrix(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got shape {a.shape}")
    return np.ascontiguousarray(a)


@dataclass
class RawDeviceData:
    """Unnormalized traffic for one device, keyed by traffic class."""

    device_id: str
    benign: np.ndarray
    attacks: dict

    def __post_init__(self):
        self.benign = _as_matrix(self.benign, "benign")
        if self.benign.shape[1] != FEATURE_COUNT:
            raise DataError(
                f"device {self.device_id}: benign width "
                f"{self.benign.shape[1]}, expected {FEATURE_COUNT}")
        if not 1 <= len(self.attacks) <= 10:
            raise DataError(
                f"device {self.device_id}: {len(self.attacks)} attack types, "
                f"expected between 1 and 10")
        for key in self.attacks:
            m = _as_matrix(self.attacks[key], key)
            if m.shape[1] != FEATURE_COUNT:
                raise DataError(
                    f"device {self.device_id}: attack {key} width "
                    f"{m.shape[1]}, expected {FEATURE_COUNT}")
            self.attacks[key] = m


@dataclass(frozen=True)
class NormalizationStats:
    """Column-wise bounds taken from training rows only."""

    min_vec: np.ndarray
    max_vec: np.ndarray

    def __post_init__(self):
        mn = np.ascontiguousarray(np.asarray(self.min_vec, dtype=np.float64))
        mx = np.ascontiguousarray(np.asarray(self.max_vec, dtype=np.float64))
        if mn.ndim != 1 or mn.shape != mx.shape:
            raise ValueError("min and max must be 1-d vectors of equal length")
        if not (np.all(np.isfinite(mn)) and np.all(np.isfinite(mx))):
            raise ValueError("normalization bounds must be finite")
        if np.any(mn > mx):
            raise ValueError("min exceeds max in some column")
        object.__setattr__(self, "min_vec", mn)
        object.__setattr__(self, "max_vec", mx)

    @property
    def width(self) -> int:
        return self.min_vec.shape[0]


@dataclass(frozen=True)
class SplitIndices:
    """Seeded row selections into one device's raw data.

    Benign selections are mutually disjoint slices of one permutation;
    attack selections are per-type samples without replacement (all rows
    when a type has fewer than the target count).
    """

    train: np.ndarray
    eval: np.ndarray
    test_benign: np.ndarray
    attack_rows: dict


@dataclass
class DeviceDataset:
    """Normalized splits for one device, test labels attached (1 = attack)."""

    device_id: str
    train: np.ndarray
    eval: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray

    def __post_init__(self):
        self.train = _as_matrix(self.train, "train")
        self.eval = _as_matrix(self.eval, "eval")
        self.test_features = _as_matrix(self.test_features, "test_features")
        widths = {self.train.shape[1], self.eval.shape[1],
                  self.test_features.shape[1]}
        if len(widths) != 1:
            raise ValueError(f"split widths differ: {sorted(widths)}")
        labels = np.asarray(self.test_labels)
        if labels.ndim != 1 or labels.shape[0] != self.test_features.shape[0]:
            raise ValueError("one label per test row required")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("test labels must be 0 or 1")
        self.test_labels = np.ascontiguousarray(labels.astype(np.int64))
        positives = int(self.test_labels.sum())
        if positives * 2 != self.test_labels.shape[0]:
            raise ValueError(
                f"test set unbalanced: {positives} attack rows out of "
                f"{self.test_labels.shape[0]}")


def load_device_csv(paths, device_id: str) -> RawDeviceData:
    """Read one device's CSVs; the benign file is the one named benign.csv.

    Attack type ids come from the file stem, e.g. mirai.syn.csv -> mirai.syn.
    """
    benign = None
    attacks = {}
    for path in paths:
        path = Path(path)
        kind = path.name[:-len(".csv")] if path.name.endswith(".csv") else path.name
        matrix = _read_feature_csv(path)
        if kind == "benign":
            benign = matrix
        else:
            attacks[kind] = matrix
    if benign is None:
        raise DataError(f"device {device_id}: no benign.csv among inputs")
    return RawDeviceData(device_id=device_id, benign=benign, attacks=attacks)


def _read_feature_csv(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, header=0, dtype=np.float64)
    except (ValueError, pd.errors.ParserError):
        _diagnose_csv(path)
        raise DataError(f"{path}: malformed CSV")  # diagnosis found nothing
    if frame.shape[1] != FEATURE_COUNT:
        raise DataError(
            f"{path}: line 1: expected {FEATURE_COUNT} columns, "
            f"got {frame.shape[1]}")
    matrix = np.ascontiguousarray(frame.to_numpy(dtype=np.float64))
    if not np.all(np.isfinite(matrix)):
        # short rows are NaN-padded by the fast parser; locate the culprit
        _diagnose_csv(path)
        raise DataError(f"{path}: contains non-finite values")
    return matrix


def _diagnose_csv(path: Path):
    # slow line-by-line pass, only reached once the fast path has failed;
    # pinpoints the first offending cell with file and line
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            cells = line.rstrip("\n").split(",")
            if len(cells) != FEATURE_COUNT:
                raise DataError(
                    f"{path}: line {lineno}: expected {FEATURE_COUNT} "
                    f"columns, got {len(cells)}")
            if lineno == 1:
                continue
            for col, cell in enumerate(cells):
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: line {lineno}: non-numeric value {cell!r} "
                        f"in column {col + 1}") from None
                if not np.isfinite(value):
                    raise DataError(
                        f"{path}: line {lineno}: non-finite value {cell!r} "
                        f"in column {col + 1}")


def compute_global_minmax(train_sets) -> NormalizationStats:
    """Column-wise min and max over every matrix in the list."""
    train_sets = list(train_sets)
    if not train_sets or all(m.shape[0] == 0 for m in train_sets):
        raise ValueError("need at least one non-empty training matrix")
    widths = {m.shape[1] for m in train_sets}
    if len(widths) != 1:
        raise ValueError(f"training matrices differ in width: {sorted(widths)}")
    mins = [m.min(axis=0) for m in train_sets if m.shape[0]]
    maxs = [m.max(axis=0) for m in train_sets if m.shape[0]]
    return NormalizationStats(
        min_vec=np.min(np.stack(mins), axis=0),
        max_vec=np.max(np.stack(maxs), axis=0),
    )


def normalize(m, stats: NormalizationStats) -> np.ndarray:
    """Min-max scale each column; constant columns map to 0.0.

    No clipping: rows outside the training range (attack traffic) keep
    values outside [0, 1].
    """
    m = _as_matrix(m, "matrix")
    if m.shape[1] != stats.width:
        raise ValueError(
            f"matrix width {m.shape[1]} does not match stats width {stats.width}")
    span = stats.max_vec - stats.min_vec
    safe = np.where(span > 0.0, span, 1.0)
    out = (m - stats.min_vec) / safe
    out[:, span == 0.0] = 0.0
    return np.ascontiguousarray(out)


def split_indices(raw: RawDeviceData, seed: int) -> SplitIndices:
    """Draw the seeded row selections for one device.

    Consumption order of the generator is part of the contract: one benign
    permutation first, then one sample per attack type in sorted-key order.
    Re-running with the same seed reproduces the selection exactly.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(raw.benign.shape[0])

    attack_rows = {}
    test_benign_needed = 0
    for key in sorted(raw.attacks):
        n = raw.attacks[key].shape[0]
        take = min(ATTACK_SAMPLE_ROWS, n)
        attack_rows[key] = np.sort(rng.choice(n, size=take, replace=False))
        test_benign_needed += take

    needed = TRAIN_ROWS + EVAL_ROWS + test_benign_needed
    if perm.shape[0] < needed:
        raise DataError(
            f"device {raw.device_id}: needs {needed} benign rows "
            f"({TRAIN_ROWS} train + {EVAL_ROWS} eval + {test_benign_needed} "
            f"test), has {perm.shape[0]}: short by {needed - perm.shape[0]}")

    return SplitIndices(
        train=perm[:TRAIN_ROWS],
        eval=perm[TRAIN_ROWS:TRAIN_ROWS + EVAL_ROWS],
        test_benign=perm[TRAIN_ROWS + EVAL_ROWS:needed],
        attack_rows=attack_rows,
    )


def synthesize_device_split(raw: RawDeviceData, stats: NormalizationStats,
                            seed: int) -> DeviceDataset:
    """Build one device's normalized train/eval/test splits.

    Test rows are the sampled attack rows of every type (in sorted-key
    order) followed by an equal number of held-out benign rows.
    """
    idx = split_indices(raw, seed)
    attack_parts = [raw.attacks[key][idx.attack_rows[key]]
                    for key in sorted(idx.attack_rows)]
    benign_part = raw.benign[idx.test_benign]
    test_raw = np.vstack(attack_parts + [benign_part])
    n_attack = test_raw.shape[0] - benign_part.shape[0]
    labels = np.concatenate([
        np.ones(n_attack, dtype=np.int64),
        np.zeros(benign_part.shape[0], dtype=np.int64),
    ])
    return DeviceDataset(
        device_id=raw.device_id,
        train=normalize(raw.benign[idx.train], stats),
        eval=normalize(raw.benign[idx.eval], stats),
        test_features=normalize(test_raw, stats),
        test_labels=labels,
    )


def prepare_corpus(raws, seed: int):
    """Run the full pipeline: seeded splits, train-only stats, normalization.

    Returns (datasets, stats). Normalization bounds are computed over the
    selected train rows of every device and nothing else.
    """
    raws = list(raws)
    if not raws:
        raise ValueError("need at least one device")
    selections = [split_indices(raw, seed) for raw in raws]
    stats = compute_global_minmax(
        [raw.benign[idx.train] for raw, idx in zip(raws, selections)])
    datasets = [synthesize_device_split(raw, stats, seed) for raw in raws]
    return datasets, stats


def build_global_testset(devices):
    """Concatenate every device's test split into one labeled set."""
    devices = list(devices)
    if not devices:
        raise ValueError("need at least one device")
    features = np.vstack([d.test_features for d in devices])
    labels = np.concatenate([d.test_labels for d in devices])
    return np.ascontiguousarray(features), np.ascontiguousarray(labels)


SYNTH_MIRAI = ["mirai.ack", "mirai.scan", "mirai.syn", "mirai.udp",
               "mirai.udpplain"]
SYNTH_GAFGYT = ["gafgyt.combo", "gafgyt.junk", "gafgyt.scan", "gafgyt.tcp",
                "gafgyt.udp"]
SYNTH_SIGMA = 0.02
SYNTH_ATTACK_ROWS = 700
SYNTH_SHIFT_COORDS = 24


def generate_synthetic_corpus(n_devices: int, seed: int):
    """Stand-in corpus: one Gaussian cluster per device, shifted per attack.

    Benign rows sit in a tight per-device cluster inside [0,1]^115; each
    attack type shifts a fixed subset of coordinates by at least 8 sigma,
    away from the nearer boundary, so detection is learnable from benign
    data alone. Every third device is gafgyt-only, mirroring corpora where
    some devices lack one malware family.
    """
    if n_devices < 1:
        raise ValueError("n_devices must be at least 1")
    rng = np.random.default_rng(seed)
    devices = []
    for i in range(n_devices):
        attack_types = SYNTH_GAFGYT if i % 3 == 2 else SYNTH_MIRAI + SYNTH_GAFGYT
        n_benign = TRAIN_ROWS + EVAL_ROWS + ATTACK_SAMPLE_ROWS * len(attack_types) + 1000
        mean = rng.uniform(0.3, 0.7, size=FEATURE_COUNT)
        benign = rng.normal(mean, SYNTH_SIGMA, size=(n_benign, FEATURE_COUNT))
        np.clip(benign, 0.0, 1.0, out=benign)
        attacks = {}
        for key in attack_types:
            coords = rng.choice(FEATURE_COUNT, size=SYNTH_SHIFT_COORDS,
                                replace=False)
            shift = rng.uniform(0.16, 0.4, size=SYNTH_SHIFT_COORDS)
            attack_mean = mean.copy()
            direction = np.where(mean[coords] <= 0.5, 1.0, -1.0)
            attack_mean[coords] += direction * shift
            rows = rng.normal(attack_mean, SYNTH_SIGMA,
                              size=(SYNTH_ATTACK_ROWS, FEATURE_COUNT))
            np.clip(rows, 0.0, 1.0, out=rows)
            attacks[key] = rows
        devices.append(RawDeviceData(
            device_id=f"device-{i:02d}", benign=benign, attacks=attacks))
    return devices


def save_dataset(path, dataset: DeviceDataset, stats: NormalizationStats,
                 manifest: dict = None):
    """Write one device's splits as flat binary, plus an optional manifest.

    The binary layout is deterministic, so identical inputs produce
    identical bytes. The manifest is a sorted key: value text file at
    <path>.manifest.
    """
    path = Path(path)
    did = dataset.device_id.encode("utf-8")
    width = dataset.train.shape[1]
    if stats.width != width:
        raise ValueError("stats width does not match dataset width")
    header = b"".join([
        MAGIC,
        struct.pack("<B", FORMAT_VERSION),
        struct.pack("<H", len(did)),
        did,
        struct.pack("<IIII", width, dataset.train.shape[0],
                    dataset.eval.shape[0], dataset.test_features.shape[0]),
    ])
    body = b"".join([
        stats.min_vec.tobytes(),
        stats.max_vec.tobytes(),
        dataset.train.tobytes(),
        dataset.eval.tobytes(),
        dataset.test_features.tobytes(),
        dataset.test_labels.astype(np.uint8).tobytes(),
    ])
    path.write_bytes(header + body)
    if manifest is not None:
        lines = dict(manifest)
        lines.update({
            "device_id": dataset.device_id,
            "width": str(width),
            "rows_train": str(dataset.train.shape[0]),
            "rows_eval": str(dataset.eval.shape[0]),
            "rows_test": str(dataset.test_features.shape[0]),
        })
        text = "".join(f"{k}: {lines[k]}\n" for k in sorted(lines))
        Path(str(path) + ".manifest").write_text(text, encoding="utf-8")


def load_dataset(path):
    """Read a dataset binary back; returns (DeviceDataset, NormalizationStats)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a dataset file (bad magic)")
    if blob[4] != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {blob[4]}")
    try:
        (did_len,) = struct.unpack_from("<H", blob, 5)
        did = blob[7:7 + did_len].decode("utf-8")
        width, n_train, n_eval, n_test = struct.unpack_from(
            "<IIII", blob, 7 + did_len)
    except struct.error:
        raise DataError(f"{path}: truncated header") from None
    offset = 7 + did_len + 16
    f8 = np.dtype(np.float64).itemsize

    def take_f64(rows, cols):
        nonlocal offset
        count = rows * cols
        end = offset + count * f8
        if end > len(blob):
            raise DataError(f"{path}: truncated body")
        out = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset = end
        # owned, writable copy: frombuffer views are read-only
        return out.reshape(rows, cols).copy()

    min_vec = take_f64(1, width)[0]
    max_vec = take_f64(1, width)[0]
    train = take_f64(n_train, width)
    eval_ = take_f64(n_eval, width)
    test = take_f64(n_test, width)
    if offset + n_test > len(blob):
        raise DataError(f"{path}: truncated labels")
    labels = np.frombuffer(blob, dtype=np.uint8, count=n_test,
                           offset=offset).astype(np.int64)
    dataset = DeviceDataset(device_id=did, train=train, eval=eval_,
                            test_features=test, test_labels=labels)
    return dataset, NormalizationStats(min_vec=min_vec, max_vec=max_vec)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
