#!/usr/bin/env python3
"""Build an IDX-format MNIST subset from the digit JSON files shipped in the
`mnist` npm package (1001 grayscale digits per class, values in [0, 1]).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)

    images = bytearray()
    labels = bytearray()
    per_class = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(raw) // (SIDE * SIDE)
        per_class.append([raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(count)])

    # Interleave classes so any prefix of the file is roughly balanced.
    longest = max(len(c) for c in per_class)
    total = 0
    for i in range(longest):
        for digit, samples in enumerate(per_class):
            if i < len(samples):
                images.extend(min(255, max(0, round(v * 255))) for v in samples[i])
                labels.append(digit)
                total += 1

    with open(dst / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, total, SIDE, SIDE))
        f.write(images)
    with open(dst / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, total))
        f.write(labels)
    print(f"wrote {total} images to {dst}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
