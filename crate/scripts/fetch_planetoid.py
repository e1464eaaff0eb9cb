#!/usr/bin/env python3
"""Fetch a Planetoid citation dataset and convert it to this repo's format.

Downloads the eight `ind.<name>.*` files, reassembles the full node set in
the standard order (labeled training block, then the remaining allx nodes,
then the reordered test block), and writes:

    edges.tsv     one undirected edge per line
    features.bin  binary feature matrix (magic MLGC, u32 rows/cols, f32 data)
    labels.tsv    node<TAB>label
    splits.json   the public fixed split

Citeseer's test index has gaps (a few isolated papers are absent from the
files); the conventional fix is to give those nodes zero features and label
0. They belong to no split, so they never influence probe numbers.

Requires numpy and scipy (the raw pickles hold scipy sparse matrices).

Usage:
    python3 scripts/fetch_planetoid.py cora --out data
    python3 scripts/fetch_planetoid.py citeseer --out data
"""

import argparse
import json
import pickle
import struct
import sys
import urllib.request
from pathlib import Path

import numpy as np

SOURCE = "https://github.com/kimiyoung/planetoid/raw/master/data"
PARTS = ["x", "y", "tx", "ty", "allx", "ally", "graph", "test.index"]


def fetch(name: str, cache: Path) -> dict:
    cache.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for part in PARTS:
        fname = f"ind.{name}.{part}"
        path = cache / fname
        if not path.exists():
            url = f"{SOURCE}/{fname}"
            print(f"downloading {url}")
            with urllib.request.urlopen(url, timeout=60) as r:
                path.write_bytes(r.read())
        blobs[part] = path.read_bytes()
    return blobs


def parse(blobs: dict):
    def unpickle(key):
        return pickle.loads(blobs[key], encoding="latin1")

    x, y = unpickle("x"), unpickle("y")
    tx, ty = unpickle("tx"), unpickle("ty")
    allx, ally = unpickle("allx"), unpickle("ally")
    graph = unpickle("graph")
    test_idx = np.array([int(l) for l in blobs["test.index"].decode().split()])

    test_min, test_max = test_idx.min(), test_idx.max()
    test_span = test_max - test_min + 1
    if test_min != allx.shape[0]:
        raise ValueError(f"test block starts at {test_min}, expected {allx.shape[0]}")

    # Dense copies; these matrices are scipy sparse in the pickles.
    tx = np.asarray(tx.todense(), dtype=np.float32)
    ty = np.asarray(ty, dtype=np.float32)
    allx = np.asarray(allx.todense(), dtype=np.float32)
    ally = np.asarray(ally, dtype=np.float32)

    # Zero-fill the gap rows, then scatter the real test rows to their
    # positions inside the span.
    tx_full = np.zeros((test_span, tx.shape[1]), dtype=np.float32)
    ty_full = np.zeros((test_span, ty.shape[1]), dtype=np.float32)
    tx_full[test_idx - test_min] = tx
    ty_full[test_idx - test_min] = ty

    features = np.vstack([allx, tx_full])
    onehot = np.vstack([ally, ty_full])
    labels = onehot.argmax(axis=1)

    n = features.shape[0]
    edges = set()
    for src, nbrs in graph.items():
        for dst in nbrs:
            if src != dst and src < n and dst < n:
                edges.add((min(src, dst), max(src, dst)))

    num_train = x.shape[0]
    splits = {
        "train": list(range(num_train)),
        "val": list(range(num_train, num_train + 500)),
        "test": sorted(int(i) for i in test_idx),
    }
    return features, labels, sorted(edges), splits


def write_dataset(out_dir: Path, features, labels, edges, splits):
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "edges.tsv", "w") as f:
        for a, b in edges:
            f.write(f"{a}\t{b}\n")

    rows, cols = features.shape
    with open(out_dir / "features.bin", "wb") as f:
        f.write(b"MLGC")
        f.write(struct.pack("<II", rows, cols))
        f.write(features.astype("<f4").tobytes(order="C"))

    with open(out_dir / "labels.tsv", "w") as f:
        for i, label in enumerate(labels):
            f.write(f"{i}\t{int(label)}\n")

    with open(out_dir / "splits.json", "w") as f:
        json.dump(splits, f)
        f.write("\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dataset", choices=["cora", "citeseer"])
    ap.add_argument("--out", type=Path, default=Path("data"), help="parent directory for the dataset folder")
    ap.add_argument("--cache", type=Path, default=Path("data/.planetoid-cache"), help="where raw downloads are kept")
    args = ap.parse_args()

    try:
        blobs = fetch(args.dataset, args.cache)
    except Exception as e:
        print(f"download failed: {e}", file=sys.stderr)
        print("this environment may have no network access; run the script elsewhere and copy the dataset folder in", file=sys.stderr)
        return 1

    features, labels, edges, splits = parse(blobs)
    out_dir = args.out / args.dataset
    write_dataset(out_dir, features, labels, edges, splits)
    print(
        f"wrote {out_dir}: {features.shape[0]} nodes, {features.shape[1]} features, "
        f"{len(edges)} edges, {labels.max() + 1} classes, "
        f"splits {len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
