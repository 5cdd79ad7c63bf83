#!/usr/bin/env python3
"""Write the small regression datasets used by `fvi regress` and acceptance.

    python3 tools/make_datasets.py [--out data]

diabetes.csv   sklearn's diabetes data (442 rows, 10 features, target last)
friedman1.csv  Friedman #1 synthetic problem (500 rows, 10 features, noise 1.0, seed 0)
"""

import argparse
import pathlib

import numpy as np
from sklearn.datasets import load_diabetes, make_friedman1


def write(path, x, y, names, target):
    header = ",".join(list(names) + [target])
    data = np.column_stack([x, y])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
    print(f"{path}: {data.shape[0]} rows, {x.shape[1]} features")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=pathlib.Path(__file__).resolve().parent.parent / "data", type=pathlib.Path)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    d = load_diabetes()
    write(args.out / "diabetes.csv", d.data, d.target, d.feature_names, "progression")

    x, y = make_friedman1(n_samples=500, n_features=10, noise=1.0, random_state=0)
    write(args.out / "friedman1.csv", x, y, [f"x{i}" for i in range(10)], "y")


if __name__ == "__main__":
    main()
