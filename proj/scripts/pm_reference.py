#!/usr/bin/env python3
"""Independent reimplementation of the Perona-Malik forward evolution.

Recomputes the committed golden output (4 explicit steps, dt=0.1, lambda=0.2)
from the committed input with numpy only, and fails if the two disagree.
Usage: pm_reference.py <input.txt> <golden.txt>
"""

import sys

import numpy as np

DT = 0.1
LAMBDA = 0.2
STEPS = 4


def read_text_image(path):
    with open(path) as fh:
        w, h = (int(t) for t in fh.readline().split())
        vals = np.array([float(fh.readline()) for _ in range(w * h)])
    return vals.reshape(h, w)


def shift(u, d):
    """Neighbor read with edge replication."""
    if d == "N":
        return np.vstack([u[0:1, :], u[:-1, :]])
    if d == "S":
        return np.vstack([u[1:, :], u[-1:, :]])
    if d == "W":
        return np.hstack([u[:, 0:1], u[:, :-1]])
    if d == "E":
        return np.hstack([u[:, 1:], u[:, -1:]])
    raise ValueError(d)


def pm_step(u):
    update = np.zeros_like(u)
    for d in ("N", "W", "S", "E"):
        un = shift(u, d)
        g = 1.0 / (1.0 + (un - u) ** 2 / LAMBDA**2)
        update += g * (un - u)
    return u + DT * update


def main():
    if len(sys.argv) != 3:
        print("usage: pm_reference.py <input.txt> <golden.txt>", file=sys.stderr)
        return 2
    u = read_text_image(sys.argv[1])
    golden = read_text_image(sys.argv[2])
    for _ in range(STEPS):
        u = pm_step(u)
    gap = np.abs(u - golden).max()
    print(f"max abs difference vs golden: {gap:.3e}")
    if gap > 1e-10:
        print("FAIL: golden file disagrees with the independent reference", file=sys.stderr)
        return 1
    print("PASS")
    return 0


if __name__ == "__main__":
    sys.exit(main())
