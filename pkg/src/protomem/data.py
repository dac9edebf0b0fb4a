"""Dataset containers, binary/CSV ingestion, and the session-stream split."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptHeaderError,
    InsufficientClassesError,
    InsufficientSamplesError,
    ShapeMismatchError,
    SizeNotMultipleOfRecordError,
    TruncatedPayloadError,
)
from .numerics import check_finite

DATASET_MAGIC = b"OFDS"
DATASET_VERSION = 1
_DTYPE_F32, _DTYPE_F64, _DTYPE_U8 = 0, 1, 2

CIFAR_RECORD_BYTES = 2 + 3 * 32 * 32  # coarse label, fine label, pixels


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (N, dim) float64
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ShapeMismatchError("inputs must be a (N, dim) matrix")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise ShapeMismatchError("labels must align with input rows")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        check_finite(self.inputs, "dataset inputs")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def class_ids(self) -> list:
        return sorted(set(self.labels.tolist()))

    def indices_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def take(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx].copy(), self.labels[idx].copy())

    def subset_by_classes(self, class_ids) -> "LabeledDataset":
        wanted = set(int(c) for c in class_ids)
        mask = np.array([int(l) in wanted for l in self.labels], dtype=bool)
        return LabeledDataset(self.inputs[mask].copy(), self.labels[mask].copy())


@dataclass
class SessionStream:
    """Base session plus T disjoint incremental sessions and a shared test set."""

    base: LabeledDataset
    sessions: list
    ways: int
    shots: int
    test: LabeledDataset

    def all_class_ids(self) -> list:
        ids = list(self.base.class_ids())
        for s in self.sessions:
            ids.extend(s.class_ids())
        return ids

    def classes_through(self, t: int) -> list:
        """Union of class ids seen up to and including session t (0 = base)."""
        ids = list(self.base.class_ids())
        for s in self.sessions[:t]:
            ids.extend(s.class_ids())
        return sorted(ids)


def save_dataset(ds: LabeledDataset, path, dtype: str = "f64"):
    codes = {"f32": _DTYPE_F32, "f64": _DTYPE_F64, "u8": _DTYPE_U8}
    if dtype not in codes:
        raise ValueError(f"unsupported dtype {dtype!r}")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIB", DATASET_VERSION, len(ds), ds.input_dim, codes[dtype]))
        if dtype == "f32":
            fh.write(ds.inputs.astype("<f4").tobytes())
        elif dtype == "f64":
            fh.write(ds.inputs.astype("<f8").tobytes())
        else:
            fh.write(np.clip(np.rint(ds.inputs * 255.0), 0, 255).astype(np.uint8).tobytes())
        fh.write(ds.labels.astype("<u4").tobytes())


def _load_binary_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 17 or blob[:4] != DATASET_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic")
    version, count, dim, dtype = struct.unpack_from("<IIIB", blob, 4)
    if version != DATASET_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported version {version}")
    if dtype not in (_DTYPE_F32, _DTYPE_F64, _DTYPE_U8):
        raise CorruptHeaderError(f"{path}: unknown dtype code {dtype}")
    if dim == 0:
        raise CorruptHeaderError(f"{path}: zero feature dimension")
    item = {_DTYPE_F32: 4, _DTYPE_F64: 8, _DTYPE_U8: 1}[dtype]
    off = 17
    need = count * dim * item + count * 4
    if len(blob) - off < need:
        raise TruncatedPayloadError(f"{path}: payload shorter than header promises")
    if dtype == _DTYPE_F32:
        x = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off).astype(np.float64)
    elif dtype == _DTYPE_F64:
        x = np.frombuffer(blob, dtype="<f8", count=count * dim, offset=off).astype(np.float64)
    else:
        x = np.frombuffer(blob, dtype=np.uint8, count=count * dim, offset=off) / 255.0
    off += count * dim * item
    y = np.frombuffer(blob, dtype="<u4", count=count, offset=off).astype(np.int64)
    return LabeledDataset(x.reshape(count, dim), y)


def _load_csv_dataset(path) -> LabeledDataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if not cols or cols[0] != "label":
            raise CorruptHeaderError(f"{path}: CSV header must start with 'label'")
        dim = len(cols) - 1
        xs, ys = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim + 1:
                raise TruncatedPayloadError(f"{path}:{lineno}: wrong field count")
            ys.append(int(parts[0]))
            xs.append([float(v) for v in parts[1:]])
    if not xs:
        return LabeledDataset(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))
    return LabeledDataset(np.array(xs), np.array(ys, dtype=np.int64))


def save_dataset_csv(ds: LabeledDataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("label," + ",".join(f"f{i}" for i in range(ds.input_dim)) + "\n")
        for row, lab in zip(ds.inputs, ds.labels):
            fh.write(str(int(lab)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path, format: str = "raw-binary") -> LabeledDataset:
    if format == "raw-binary":
        return _load_binary_dataset(path)
    if format == "csv":
        return _load_csv_dataset(path)
    raise ValueError(f"unknown dataset format {format!r}")


def load_cifar_batch(path) -> LabeledDataset:
    """Parse a CIFAR100 binary batch: per record a coarse label byte, a
    fine label byte, then 3072 pixel bytes. Fine labels are kept and
    pixels scaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % CIFAR_RECORD_BYTES != 0:
        raise SizeNotMultipleOfRecordError(
            f"{path}: {len(blob)} bytes is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    n = len(blob) // CIFAR_RECORD_BYTES
    if n == 0:
        return LabeledDataset(np.zeros((0, 3072)), np.zeros(0, dtype=np.int64))
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = raw[:, 1].astype(np.int64)
    pixels = raw[:, 2:].astype(np.float64) / 255.0
    return LabeledDataset(pixels, labels)


def split_fscil(
    dataset: LabeledDataset,
    base_classes: int,
    ways: int,
    shots: int,
    per_class_cap: int,
    test_per_class: int,
    seed: int,
    sessions: int | None = None,
) -> SessionStream:
    """Deterministic seeded split into base + N-way S-shot sessions + test.

    Classes are sorted by id; the base takes the first `base_classes`,
    sessions take consecutive blocks of `ways`. Within a class, sample
    selection is a seeded shuffle: test_per_class rows go to the test
    set, then per_class_cap (base) or shots (incremental) to training.
    When `sessions` is None every remaining full block of classes forms
    a session; leftover classes are dropped entirely.
    """
    if ways < 1 or shots < 1 or base_classes < 1:
        raise ValueError("base_classes, ways, and shots must be positive")
    classes = dataset.class_ids()
    if sessions is None:
        sessions = (len(classes) - base_classes) // ways
        if sessions < 0:
            raise InsufficientClassesError(
                f"{len(classes)} classes cannot cover a {base_classes}-class base"
            )
    needed = base_classes + sessions * ways
    if needed > len(classes):
        raise InsufficientClassesError(
            f"need {needed} classes ({base_classes} base + {sessions}x{ways}-way), "
            f"dataset has {len(classes)}"
        )
    rng = np.random.default_rng(seed)
    train_idx: dict[int, np.ndarray] = {}
    test_idx = []
    used = classes[:needed]
    for rank, cid in enumerate(used):
        pool = dataset.indices_of(cid)
        want_train = per_class_cap if rank < base_classes else shots
        if len(pool) < test_per_class + want_train:
            raise InsufficientSamplesError(
                f"class {cid} has {len(pool)} samples, needs {test_per_class + want_train}"
            )
        order = rng.permutation(len(pool))
        shuffled = pool[order]
        test_idx.extend(shuffled[:test_per_class].tolist())
        train_idx[cid] = shuffled[test_per_class : test_per_class + want_train]
    base_rows = np.concatenate([train_idx[c] for c in used[:base_classes]])
    base = dataset.take(base_rows)
    session_sets = []
    for t in range(sessions):
        block = used[base_classes + t * ways : base_classes + (t + 1) * ways]
        rows = np.concatenate([train_idx[c] for c in block])
        session_sets.append(dataset.take(rows))
    test = dataset.take(np.array(sorted(test_idx), dtype=np.int64))
    return SessionStream(base, session_sets, ways, shots, test)
