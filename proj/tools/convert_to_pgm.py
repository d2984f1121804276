#!/usr/bin/env python3
"""Convert a directory tree of JPEG/PNG chest X-rays into binary 8-bit PGMs.

The tree layout is preserved, so NORMAL/PNEUMONIA (optionally under
train/val/test) come out ready for `cxrnet train --data`.
Color images are reduced with luma = round(0.299 R + 0.587 G + 0.114 B).

    convert_to_pgm.py SRC DST
"""

import argparse
import sys
from pathlib import Path

from PIL import Image

EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff"}


def to_gray(img):
    if img.mode in ("L", "P"):
        return img.convert("L")
    if img.mode in ("I;16", "I"):
        return img.point(lambda v: v / 256).convert("L")
    rgb = img.convert("RGB").tobytes()
    luma = bytes(
        min(255, int(0.299 * rgb[i] + 0.587 * rgb[i + 1] + 0.114 * rgb[i + 2] + 0.5)) for i in range(0, len(rgb), 3)
    )
    out = Image.frombytes("L", img.size, luma)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path)
    ap.add_argument("dst", type=Path)
    args = ap.parse_args()

    converted = failed = 0
    for path in sorted(args.src.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in EXTENSIONS:
            continue
        target = args.dst / path.relative_to(args.src).with_suffix(".pgm")
        target.parent.mkdir(parents=True, exist_ok=True)
        try:
            with Image.open(path) as img:
                to_gray(img).save(target, format="PPM")
            converted += 1
        except OSError as e:
            print(f"skip {path}: {e}", file=sys.stderr)
            failed += 1
    print(f"converted {converted}, skipped {failed}")
    return 0 if converted else 1


if __name__ == "__main__":
    sys.exit(main())
