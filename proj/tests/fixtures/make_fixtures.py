#!/usr/bin/env python3
"""Hand-assembled binary fixtures, written field by field from the byte
layout table with the struct module. Values are exact in float32 so the
tests can compare with ==.

    python3 tests/fixtures/make_fixtures.py tests/fixtures
"""

import struct
import sys
from pathlib import Path


def name(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def f32s(values):
    return struct.pack(f"<{len(values)}f", *values)


def bank(with_labels):
    # 2 domains, 3 samples, C = 2; domain "art" has d_backbone 2, "clip" 3.
    out = b"FBNK" + struct.pack("<IIQIB", 1, 2, 3, 2, 1 if with_labels else 0)
    out += name("art") + struct.pack("<I", 2)
    out += f32s([0.5, -1.0, 2.0, 0.25, -3.5, 4.0])
    out += name("clip") + struct.pack("<I", 3)
    out += f32s([1.0, 2.0, 3.0, -0.5, -0.75, 8.0, 0.0, 16.0, -2.0])
    if with_labels:
        out += struct.pack("<3I", 1, 0, 1)
    return out


def heads():
    # 2 heads, d_k = 2, C = 3.
    out = b"SHED" + struct.pack("<IIII", 1, 2, 2, 3)
    for label, d_bb, base in (("src_a", 2, 0.0), ("src_b", 1, 10.0)):
        out += name(label) + struct.pack("<I", d_bb) + struct.pack("<f", 0.001)
        out += f32s([base + 0.5 * k for k in range(d_bb * 2)])  # bottleneck weight
        out += f32s([base + 0.125, -0.125])                    # bottleneck bias
        out += f32s([1.5, 0.75])                               # bn scale
        out += f32s([0.25, -0.25])                             # bn shift
        out += f32s([-1.0, 1.0])                               # running mean
        out += f32s([2.0, 0.5])                                # running var
        out += f32s([0.0, 1.0, -1.0, 0.5, 0.25, -2.0])        # classifier weight 3x2
        out += f32s([0.0, 0.0, 0.0])                           # classifier bias
    return out


def main():
    root = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent)
    (root / "bank_labeled.fbnk").write_bytes(bank(True))
    (root / "bank_unlabeled.fbnk").write_bytes(bank(False))
    (root / "heads.shed").write_bytes(heads())


if __name__ == "__main__":
    main()
