"""Explicit memory: integer class prototypes, right-shift precision
reduction, bipolarization, and nearest-prototype cosine classification.

Prototypes accumulate quantized features as exact integer sums. The mean
never has to be materialized: cosine similarity is scale-invariant, so
dividing by the shot count (or shifting right) changes no decision.
"""

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    DuplicateClassError,
    EmptyMemoryError,
    FormatVersionMismatchError,
    OverflowAfterShiftError,
    ShapeMismatchError,
    ZeroNormError,
)
from .numerics import ZERO_NORM_FLOOR, as_vector, check_finite, cossim

EM_MAGIC = b"OFEM"
ACTMEM_MAGIC = b"OFAM"
SNAPSHOT_VERSION = 1


@dataclass
class QuantSpec:
    """Bit-width policy for feature quantization and prototype storage.

    accum_bits must leave headroom for max_shots additions of
    feature_bits-wide values; prototype_bits is the storage width after
    the optional right shift (accum_bits means no reduction).
    """

    feature_bits: int = 8
    accum_bits: int = 32
    prototype_bits: int | None = None
    right_shift: int = 0
    max_shots: int = 256

    def __post_init__(self):
        if self.prototype_bits is None:
            self.prototype_bits = self.accum_bits
        if not 2 <= self.feature_bits <= 32:
            raise ValueError("feature_bits must be in [2, 32]")
        if not 1 <= self.prototype_bits <= self.accum_bits:
            raise ValueError("prototype_bits must be in [1, accum_bits]")
        if self.accum_bits > 64:
            raise ValueError("accum_bits beyond 64 is not representable")
        if self.right_shift < 0 or self.max_shots < 1:
            raise ValueError("right_shift must be >= 0 and max_shots >= 1")
        headroom = self.feature_bits + math.ceil(math.log2(self.max_shots))
        if self.accum_bits < headroom:
            raise ValueError(
                f"accum_bits {self.accum_bits} < feature_bits + log2(max_shots) = {headroom}"
            )


class QuantizedFeature(NamedTuple):
    values: np.ndarray  # int64
    scale: float
    degenerate: bool


def quantize_feature(theta_p, feature_bits: int) -> QuantizedFeature:
    """Symmetric per-vector quantization to signed feature_bits integers.

    s = max|x| / (2^(b-1) - 1); q = clamp(round(x / s)). An all-zero
    vector cannot define a scale: it quantizes to zeros with scale 1 and
    the degenerate flag set.
    """
    x = check_finite(as_vector(theta_p), "feature vector")
    qmax = (1 << (feature_bits - 1)) - 1
    peak = float(np.abs(x).max())
    if peak == 0.0:
        return QuantizedFeature(np.zeros(x.size, dtype=np.int64), 1.0, True)
    scale = peak / qmax
    q = np.clip(np.rint(x / scale), -(qmax + 1), qmax).astype(np.int64)
    return QuantizedFeature(q, scale, False)


def dequantize(values, scale: float) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * scale


@dataclass
class Prototype:
    """Per-class aggregate: exact integer sum of quantized features plus
    the reduced-precision representation actually used by the classifier."""

    class_id: int
    accum: np.ndarray  # int64 sum of quantized features
    count: int
    quantized: np.ndarray  # int64 values fitting in prototype_bits
    scale_shift: int = 0

    def __post_init__(self):
        self.accum = np.asarray(self.accum, dtype=np.int64)
        self.quantized = np.asarray(self.quantized, dtype=np.int64)
        if self.accum.shape != self.quantized.shape:
            raise ShapeMismatchError("accumulator and quantized vectors differ in shape")
        if self.count < 1:
            raise ValueError("a usable prototype needs count >= 1")

    def mean_vector(self) -> np.ndarray:
        """Full-precision class mean of the quantized features."""
        return self.accum.astype(np.float64) / self.count

    def direction(self) -> np.ndarray:
        """The stored reduced-precision vector as float, for cosine scoring."""
        return self.quantized.astype(np.float64)


def choose_shift(proto: Prototype, target_bits: int) -> int:
    """Minimal right shift so max|accum| fits the symmetric signed range."""
    limit = (1 << (target_bits - 1)) - 1
    peak = int(np.abs(proto.accum).max()) if proto.accum.size else 0
    shift = 0
    while (peak >> shift) > limit:
        shift += 1
    return shift


def reduce_precision(proto: Prototype, target_bits: int, shift: int) -> Prototype:
    """Arithmetic right shift of the accumulator into target_bits storage.

    Negative values round toward -inf (hardware shift semantics). Raises
    OverflowAfterShiftError when a shifted entry still falls outside the
    signed target range, signalling that the shift was too small.
    """
    if shift < 0:
        raise ValueError("shift must be nonnegative")
    shifted = proto.accum >> shift
    lo = -(1 << (target_bits - 1))
    hi = (1 << (target_bits - 1)) - 1
    if shifted.min() < lo or shifted.max() > hi:
        raise OverflowAfterShiftError(
            f"entries exceed {target_bits}-bit range after shift {shift}"
        )
    return Prototype(proto.class_id, proto.accum, proto.count, shifted, shift)


def bipolarize(x) -> np.ndarray:
    """Map entries to {-1, +1} by sign, with 0 mapped to +1."""
    arr = np.asarray(x)
    return np.where(arr >= 0, 1, -1).astype(np.int64)


class ExplicitMemory:
    """Ordered store of class prototypes; the classifier's entire state."""

    def __init__(self, d_p: int, quant: QuantSpec | None = None):
        if d_p < 1:
            raise ShapeMismatchError("d_p must be positive")
        self.d_p = d_p
        self.quant = quant if quant is not None else QuantSpec()
        self._protos: dict[int, Prototype] = {}

    def __len__(self) -> int:
        return len(self._protos)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._protos

    def class_ids(self) -> list:
        return list(self._protos)

    def get(self, class_id: int) -> Prototype:
        return self._protos[class_id]

    def prototypes(self) -> list:
        return list(self._protos.values())

    def add(self, proto: Prototype):
        if proto.class_id in self._protos:
            raise DuplicateClassError(f"class {proto.class_id} already stored")
        if proto.accum.size != self.d_p:
            raise ShapeMismatchError(
                f"prototype dim {proto.accum.size} != memory d_p {self.d_p}"
            )
        self._protos[proto.class_id] = proto

    def rebuilt_at_bits(self, bits: int) -> "ExplicitMemory":
        """New memory with every prototype reduced to `bits` storage.

        Each prototype takes its own minimal shift (cosine scoring is
        per-prototype scale-invariant); 1-bit storage is the sign vector.
        """
        spec = QuantSpec(
            feature_bits=self.quant.feature_bits,
            accum_bits=self.quant.accum_bits,
            prototype_bits=bits,
            right_shift=0,
            max_shots=self.quant.max_shots,
        )
        out = ExplicitMemory(self.d_p, spec)
        max_shift = 0
        for proto in self._protos.values():
            if bits == 1:
                reduced = Prototype(
                    proto.class_id, proto.accum, proto.count, bipolarize(proto.accum), 0
                )
            else:
                shift = choose_shift(proto, bits)
                reduced = reduce_precision(proto, bits, shift)
                max_shift = max(max_shift, shift)
            out.add(reduced)
        out.quant.right_shift = max_shift
        return out


def classify(em: ExplicitMemory, theta_p):
    """Nearest-prototype prediction by cosine similarity.

    Returns (class_id, scores) with scores ordered like em.class_ids().
    Ties break toward the smallest class id; a degenerate all-zero
    prototype scores 0.0 rather than poisoning the argmax.
    """
    if len(em) == 0:
        raise EmptyMemoryError("explicit memory holds no prototypes")
    q = as_vector(theta_p)
    if q.size != em.d_p:
        raise ShapeMismatchError(f"query dim {q.size} != memory d_p {em.d_p}")
    if float(np.linalg.norm(q)) < ZERO_NORM_FLOOR:
        raise ZeroNormError("query feature has near-zero norm")
    ids = em.class_ids()
    scores = np.empty(len(ids))
    for i, cid in enumerate(ids):
        direction = em.get(cid).direction()
        if float(np.linalg.norm(direction)) < ZERO_NORM_FLOOR:
            scores[i] = 0.0
        else:
            scores[i] = cossim(q, direction)
    best = scores.max()
    winner = min(cid for cid, s in zip(ids, scores) if s == best)
    return winner, scores


def em_memory_bytes(num_classes: int, d_p: int, bits: int) -> int:
    """Footprint of the prototype store at packed bit accounting."""
    return math.ceil(num_classes * d_p * bits / 8)


class SweepPoint(NamedTuple):
    bits: int
    memory_bytes: int
    accuracy: float


def precision_sweep(em: ExplicitMemory, features, labels, bits_list) -> list:
    """Accuracy/footprint trade-off across prototype bit widths.

    features: (N, d_p) query features; labels: their class ids. For each
    width the memory is rebuilt at that precision and evaluated.
    """
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels)
    if feats.ndim != 2 or feats.shape[0] != labs.shape[0]:
        raise ShapeMismatchError("features and labels disagree")
    if feats.shape[0] == 0:
        raise ShapeMismatchError("empty evaluation set")
    points = []
    for bits in bits_list:
        em_b = em.rebuilt_at_bits(bits)
        hits = 0
        for row, lab in zip(feats, labs):
            pred, _ = classify(em_b, row)
            hits += int(pred == lab)
        points.append(
            SweepPoint(bits, em_memory_bytes(len(em), em.d_p, bits), hits / feats.shape[0])
        )
    return points


def _int_bytes(bits: int) -> int:
    return (bits + 7) // 8


def save_em(em: ExplicitMemory, path):
    """Snapshot of the reduced-precision store (accumulators are runtime
    state and are not persisted)."""
    width = _int_bytes(em.quant.prototype_bits)
    with open(path, "wb") as fh:
        fh.write(EM_MAGIC)
        fh.write(
            struct.pack(
                "<IIIII",
                SNAPSHOT_VERSION,
                len(em),
                em.d_p,
                em.quant.prototype_bits,
                em.quant.right_shift,
            )
        )
        for proto in em.prototypes():
            fh.write(struct.pack("<II", proto.class_id, proto.count))
            for v in proto.quantized.tolist():
                fh.write(int(v).to_bytes(width, "little", signed=True))


def load_em(path) -> ExplicitMemory:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:4] != EM_MAGIC:
        raise FormatVersionMismatchError(f"{path}: bad magic")
    version, n, d_p, bits, shift = struct.unpack_from("<IIIII", blob, 4)
    if version != SNAPSHOT_VERSION:
        raise FormatVersionMismatchError(f"{path}: unsupported version {version}")
    width = _int_bytes(bits)
    em = ExplicitMemory(d_p, QuantSpec(prototype_bits=bits, right_shift=shift))
    off = 24
    for _ in range(n):
        if off + 8 + d_p * width > len(blob):
            raise FormatVersionMismatchError(f"{path}: truncated payload")
        cid, count = struct.unpack_from("<II", blob, off)
        off += 8
        vals = np.empty(d_p, dtype=np.int64)
        for i in range(d_p):
            vals[i] = int.from_bytes(blob[off : off + width], "little", signed=True)
            off += width
        em.add(Prototype(cid, vals, count, vals.copy(), shift))
    return em
