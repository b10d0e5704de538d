"""Convert the digit JSON files shipped in the `mnist` npm package into IDX.

Usage: python3 scripts/mnist_fixture.py <package/src/digits> <out_dir>

Writes gzip-compressed IDX files for digits 0, 1 and 2: the first 600 images
of each digit form the training split, the remainder the test split. Pixel
values are stored as round(255 * v).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

DIGITS = (0, 1, 2)
TRAIN_PER_DIGIT = 600
SIZE = 28 * 28


def write_idx(path, images, labels):
    with gzip.GzipFile(path.with_name(path.name + "-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with gzip.GzipFile(path.with_name(path.name + "-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, out):
    src, out = Path(src), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": [], "test": []}
    for d in DIGITS:
        raw = json.loads((src / f"{d}.json").read_text())["data"]
        count = len(raw) // SIZE
        for i in range(count):
            img = [min(255, max(0, round(v * 255))) for v in raw[i * SIZE:(i + 1) * SIZE]]
            key = "train" if i < TRAIN_PER_DIGIT else "test"
            splits[key].append((img, d))
    rng = random.Random(7)
    for name, rows in splits.items():
        rng.shuffle(rows)
        write_idx(out / name, [r[0] for r in rows], [r[1] for r in rows])
        print(name, len(rows))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
