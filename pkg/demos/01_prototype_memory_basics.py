"""Tour of the explicit prototype memory: quantize features, pick a right
shift, reduce precision, bipolarize, classify, and account for footprint.

Run: python3 demos/01_prototype_memory_basics.py
"""

import numpy as np

from protomem import (
    ExplicitMemory,
    Prototype,
    QuantSpec,
    bipolarize,
    choose_shift,
    classify,
    em_memory_bytes,
    quantize_feature,
    reduce_precision,
)

rng = np.random.default_rng(0)

print("== 1. symmetric feature quantization ==")
theta = rng.standard_normal(8) * 0.6
q = quantize_feature(theta, 8)
print("feature      :", np.round(theta, 3))
print("8-bit ints   :", q.values)
print("scale        :", f"{q.scale:.5f}", " max reconstruction error <= scale/2")

print("\n== 2. accumulate shots into an integer prototype ==")
shots = [rng.standard_normal(8) * 0.6 + theta for _ in range(5)]
accum = np.zeros(8, dtype=np.int64)
for s in shots:
    accum += quantize_feature(s, 8).values
proto = Prototype(class_id=0, accum=accum, count=5, quantized=accum.copy())
print("accumulator  :", proto.accum)
print("class mean   :", np.round(proto.mean_vector(), 2), "(never materialized on device)")

print("\n== 3. right-shift precision reduction ==")
wide = Prototype(1, np.array([65535, -40000, 123, -7], dtype=np.int64), 1,
                 np.array([65535, -40000, 123, -7], dtype=np.int64))
shift = choose_shift(wide, 8)
reduced = reduce_precision(wide, 8, shift)
print("accumulator  :", wide.accum, "(17-bit peak)")
print(f"minimal shift: {shift} -> 8-bit values {reduced.quantized}")
print("direction preserved: cosine to the wide vector =",
      f"{float(wide.accum @ reduced.quantized) / (np.linalg.norm(wide.accum) * np.linalg.norm(reduced.quantized)):.5f}")

print("\n== 4. one-bit storage is the sign vector ==")
print("bipolarized  :", bipolarize(wide.accum))

print("\n== 5. cosine classification with tie-breaking ==")
em = ExplicitMemory(d_p=2, quant=QuantSpec())
em.add(Prototype(0, np.array([10, 0]), 1, np.array([10, 0])))
em.add(Prototype(1, np.array([0, 10]), 1, np.array([0, 10])))
for query in ([1.0, 0.1], [0.1, 1.0], [1.0, 1.0]):
    cid, scores = classify(em, query)
    print(f"query {query} -> class {cid}  scores {np.round(scores, 3)}")
print("(the equidistant query resolves to the smallest class id)")

print("\n== 6. footprint accounting ==")
for bits in (32, 8, 3, 1):
    kb = em_memory_bytes(100, 256, bits) / 1000
    print(f"100 classes x 256 dims at {bits:2d} bits -> {kb:5.1f} kB")
