#!/usr/bin/env python3
"""Convert the Planetoid citation files (ind.<name>.x, .y, .tx, .ty, .allx,
.ally, .graph, .test.index) into tgar's edge, feature and label files.

Usage: planetoid_to_tgar.py <raw_dir> <name> <out_dir>

Splits follow the usual semi-supervised setup: the first len(y) nodes train,
the next 500 validate, and the test.index nodes test. Citeseer test ids with no
feature row (isolated nodes) get zero features and no label.
"""

import argparse
import pathlib
import pickle
import sys

import numpy as np
import scipy.sparse as sp


def load(raw: pathlib.Path, name: str, part: str):
    with open(raw / f"ind.{name}.{part}", "rb") as f:
        return pickle.load(f, encoding="latin1")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("raw_dir", type=pathlib.Path)
    ap.add_argument("name", choices=["cora", "citeseer", "pubmed"])
    ap.add_argument("out_dir", type=pathlib.Path)
    a = ap.parse_args()

    x, y, tx, ty, allx, ally, graph = (load(a.raw_dir, a.name, p) for p in ("x", "y", "tx", "ty", "allx", "ally", "graph"))
    test_index = [int(line) for line in open(a.raw_dir / f"ind.{a.name}.test.index")]
    test_sorted = sorted(test_index)

    tx, ty = sp.csr_matrix(tx), np.asarray(ty)
    if a.name == "citeseer":
        full = range(test_sorted[0], test_sorted[-1] + 1)
        tx_ext = sp.lil_matrix((len(full), tx.shape[1]))
        ty_ext = np.zeros((len(full), ty.shape[1]))
        tx_ext[np.array(test_sorted) - test_sorted[0], :] = tx
        ty_ext[np.array(test_sorted) - test_sorted[0], :] = ty
        tx, ty = tx_ext.tocsr(), ty_ext

    features = sp.vstack((sp.csr_matrix(allx), tx)).tolil()
    labels_1h = np.vstack((np.asarray(ally), ty))
    # Test rows are stored in sorted order; put them back at their ids.
    features[test_index, :] = features[test_sorted, :]
    labels_1h[test_index, :] = labels_1h[test_sorted, :]
    features = features.tocsr()
    n, d = features.shape

    has_label = labels_1h.sum(axis=1) > 0
    labels = np.where(has_label, labels_1h.argmax(axis=1), -1)

    train = list(range(len(np.asarray(y))))
    val = list(range(len(train), len(train) + 500))
    test = [v for v in test_index if has_label[v]]
    if len(test) != len(test_index):
        print(f"{a.name}: {len(test_index) - len(test)} test ids without a label were left out", file=sys.stderr)

    a.out_dir.mkdir(parents=True, exist_ok=True)
    pairs = set()
    for src, dsts in graph.items():
        for dst in dsts:
            if src != dst and src < n and dst < n:
                pairs.add((min(src, dst), max(src, dst)))
    with open(a.out_dir / "edges.tsv", "w") as f:
        f.write(f"# {a.name}: {len(pairs)} undirected pairs, symmetrize on load\n")
        for s, t in sorted(pairs):
            f.write(f"{s}\t{t}\n")
    with open(a.out_dir / "features.tsv", "w") as f:
        f.write(f"{n}\t{d}\n")
        dense = features.toarray()
        for v in range(n):
            f.write(str(v) + "\t" + "\t".join(format(val, ".17g") for val in dense[v]) + "\n")
    with open(a.out_dir / "labels.tsv", "w") as f:
        for split, nodes in (("train", train), ("val", val), ("test", test)):
            for v in nodes:
                f.write(f"{v}\t{labels[v]}\t{split}\n")
    print(f"{a.name}: N={n} d={d} pairs={len(pairs)} train={len(train)} val={len(val)} test={len(test)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
