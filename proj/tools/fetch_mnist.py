#!/usr/bin/env python3
"""Fetch MNIST digits and write them as plain (uncompressed) IDX files.

Two sources are supported:

  official  the four gzip archives from a mirror (``--url``) or a local
            directory holding them (``--from-dir``). Produces the standard
            60000-image training file and labels.
  npm       the ``mnist`` npm package, which bundles 10000 MNIST digits
            (about 1000 per class) as JSON arrays of pixel/255 values rounded to
            three decimals. Pixels are mapped back with round(v * 255).

The output directory receives ``<prefix>-images-idx3-ubyte`` and
``<prefix>-labels-idx1-ubyte``. The library never downloads anything itself.
"""

import argparse
import gzip
import json
import pathlib
import shutil
import struct
import subprocess
import sys
import tarfile
import tempfile
import urllib.request

OFFICIAL = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def write_idx(out_dir, prefix, images, labels, rows=28, cols=28):
    img_path = out_dir / f"{prefix}-images-idx3-ubyte"
    lbl_path = out_dir / f"{prefix}-labels-idx1-ubyte"
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))
    print(f"wrote {img_path} ({len(images)} images) and {lbl_path}")


def from_npm(out_dir, prefix, package_dir=None):
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        if package_dir is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                           stdout=subprocess.DEVNULL)
            tgz = next(tmp.glob("mnist-*.tgz"))
            with tarfile.open(tgz) as tar:
                tar.extractall(tmp)
            package_dir = tmp / "package"
        digits_dir = pathlib.Path(package_dir) / "src" / "digits"
        per_digit = []
        for d in range(10):
            data = json.loads((digits_dir / f"{d}.json").read_text())["data"]
            n = len(data) // 784
            per_digit.append([
                [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
                for i in range(n)
            ])
        # interleave classes so that file order is not sorted by label
        images, labels = [], []
        longest = max(len(p) for p in per_digit)
        for i in range(longest):
            for d in range(10):
                if i < len(per_digit[d]):
                    images.append(per_digit[d][i])
                    labels.append(d)
        write_idx(out_dir, prefix, images, labels)


def from_official(out_dir, source):
    for name in OFFICIAL:
        target = out_dir / name
        if source.startswith("http"):
            url = f"{source.rstrip('/')}/{name}.gz"
            print(f"downloading {url}")
            with urllib.request.urlopen(url) as r, gzip.GzipFile(fileobj=r) as g, \
                    open(target, "wb") as f:
                shutil.copyfileobj(g, f)
        else:
            src = pathlib.Path(source) / f"{name}.gz"
            if not src.exists():
                src = pathlib.Path(source) / name
                shutil.copyfile(src, target)
                continue
            with gzip.open(src) as g, open(target, "wb") as f:
                shutil.copyfileobj(g, f)
        print(f"wrote {target}")


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--source", choices=["npm", "official"], default="npm")
    ap.add_argument("--url", help="mirror base URL for the official archives")
    ap.add_argument("--from-dir", help="directory with the official archives")
    ap.add_argument("--package-dir", help="already-extracted npm package directory")
    ap.add_argument("--out", default="data")
    ap.add_argument("--prefix", default="mnist-npm")
    args = ap.parse_args()
    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.source == "npm":
        from_npm(out_dir, args.prefix, args.package_dir)
    else:
        src = args.url or args.from_dir
        if not src:
            sys.exit("--source official needs --url or --from-dir")
        from_official(out_dir, src)


if __name__ == "__main__":
    main()
