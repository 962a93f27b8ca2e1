#!/usr/bin/env python3
"""Render an `nbayes export-grid` CSV, optionally with the training points.

    python3 tools/plot_grid.py grid.csv out.png [labels.csv data.csv]

Needs matplotlib. Grid cells are shaded by argmax label, lighter where max_prob is low.
"""
import csv
import sys


def read(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def main() -> int:
    if len(sys.argv) not in (3, 5):
        print(__doc__, file=sys.stderr)
        return 2
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = read(sys.argv[1])
    xs = [float(r["x"]) for r in grid]
    ys = [float(r["y"]) for r in grid]
    labels = [int(r["argmax_label"]) for r in grid]
    conf = [float(r["max_prob"]) for r in grid]
    cmap = plt.get_cmap("tab10")
    colors = [(*cmap(lab % 10)[:3], 0.15 + 0.35 * c) for lab, c in zip(labels, conf)]

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(xs, ys, c=colors, s=6, marker="s", linewidths=0)
    if len(sys.argv) == 5:
        pred = [int(r["predicted"]) for r in read(sys.argv[3])]
        data = read(sys.argv[4])
        if len(data[0]) - 1 != 2:
            print("training points are drawn only for 2-D data", file=sys.stderr)
        else:
            px = [float(r["x0"]) for r in data]
            py = [float(r["x1"]) for r in data]
            ax.scatter(px, py, c=[cmap(p % 10) for p in pred], s=4)
    ax.set_aspect("equal")
    fig.savefig(sys.argv[2], dpi=150, bbox_inches="tight")
    return 0


if __name__ == "__main__":
    sys.exit(main())
