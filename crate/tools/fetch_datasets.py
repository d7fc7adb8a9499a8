#!/usr/bin/env python3
"""Fetch the binary benchmark datasets into a directory laid out for `made`.

Every split is written as `<name>.<split>` (space-separated 0/1, one example
per line), which is what `made train` and `$MADE_DATA_DIR` expect.

    tools/fetch_datasets.py --out data mnist
    tools/fetch_datasets.py --out data --uci-base URL adult mushrooms dna
    tools/fetch_datasets.py --out data --from-dir ~/Downloads adult

Binarized MNIST is downloaded from its usual location. For the UCI suite pass
the base URL (or a local directory) of a mirror that serves
`<name>/<name>_{train,valid,test}.amat` or `<name>_{train,valid,test}.amat`.
"""

import argparse
import gzip
import os
import sys
import urllib.request

MNIST_BASE = "http://www.cs.toronto.edu/~larocheh/public/datasets/binarized_mnist"
SPLITS = ("train", "valid", "test")
EXPECTED = {
    "adult": (123, 5000, 1414, 26147),
    "mushrooms": (112, 2000, 500, 5624),
    "dna": (180, 1400, 600, 1186),
    "binarized_mnist": (784, 50000, 10000, 10000),
}


def read_source(location):
    if location.startswith(("http://", "https://")):
        with urllib.request.urlopen(location, timeout=60) as resp:
            data = resp.read()
    else:
        with open(location, "rb") as f:
            data = f.read()
    if location.endswith(".gz"):
        data = gzip.decompress(data)
    return data.decode("ascii")


def candidates(base, name, split):
    sep = "/" if base.startswith(("http://", "https://")) else os.sep
    base = base.rstrip("/\\")
    for stem in (f"{name}{sep}{name}_{split}.amat", f"{name}_{split}.amat", f"{name}.{split}"):
        yield f"{base}{sep}{stem}"
        yield f"{base}{sep}{stem}.gz"


def canonical(text, where):
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        # Some .amat files carry floats such as 1.0 / 0.0.
        try:
            bits = ["1" if float(t) != 0.0 else "0" for t in tokens]
        except ValueError:
            sys.exit(f"{where}:{lineno}: non-numeric token")
        if any(float(t) not in (0.0, 1.0) for t in tokens):
            sys.exit(f"{where}:{lineno}: non-binary value")
        rows.append(" ".join(bits))
    return rows


def fetch(name, base, out_dir):
    shape = []
    for split in SPLITS:
        text, where = None, None
        for loc in candidates(base, name, split):
            try:
                text, where = read_source(loc), loc
                break
            except (OSError, ValueError):
                continue
        if text is None:
            sys.exit(f"{name}: no {split} split found under {base}")
        rows = canonical(text, where)
        dest = os.path.join(out_dir, f"{name}.{split}")
        with open(dest, "w", newline="\n") as f:
            f.write("\n".join(rows) + "\n")
        shape.append((len(rows[0].split()), len(rows)))
        print(f"{dest}: {len(rows)} x {shape[-1][0]}")
    dims = {d for d, _ in shape}
    if len(dims) != 1:
        sys.exit(f"{name}: splits disagree on the input dimension: {sorted(dims)}")
    expected = EXPECTED.get(name)
    got = (dims.pop(), *(n for _, n in shape))
    if expected and got != expected:
        print(f"warning: {name} is {got}, expected {expected}", file=sys.stderr)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("datasets", nargs="+", help="mnist, adult, mushrooms, dna, ...")
    ap.add_argument("--out", required=True, help="output directory (use as $MADE_DATA_DIR)")
    ap.add_argument("--uci-base", help="base URL or directory of a UCI suite mirror")
    ap.add_argument("--from-dir", help="local directory holding already downloaded files")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for name in args.datasets:
        if name in ("mnist", "binarized_mnist"):
            fetch("binarized_mnist", args.from_dir or MNIST_BASE, args.out)
        else:
            base = args.from_dir or args.uci_base
            if not base:
                sys.exit(f"{name}: pass --uci-base or --from-dir")
            fetch(name, base, args.out)


if __name__ == "__main__":
    main()
