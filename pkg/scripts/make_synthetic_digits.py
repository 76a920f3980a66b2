#!/usr/bin/env python3
"""Generate a deterministic MNIST-like digit dataset in IDX format.

Digits are rendered from stroke skeletons with random affine jitter (shift,
scale, rotation, shear) and pixel noise.  Used as a stand-in corpus when the
real MNIST files are not present; the file format and tensor shapes are
identical to MNIST's.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cimsim.dataio import save_idx  # noqa: E402


def _arc(cx, cy, rx, ry, a0, a1, n=12):
    t = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _poly_segments(points):
    pts = np.asarray(points)
    return np.stack([pts[:-1], pts[1:]], axis=1)


def _strokes_to_segments(strokes):
    return np.concatenate([_poly_segments(s) for s in strokes], axis=0)


def digit_skeletons():
    """Stroke polylines per digit on a unit canvas (x right, y down)."""
    s = {}
    s[0] = [_arc(0.5, 0.5, 0.21, 0.31, 0, 2 * np.pi, 24)]
    s[1] = [[(0.36, 0.28), (0.54, 0.16)], [(0.54, 0.16), (0.54, 0.84)],
            [(0.38, 0.84), (0.68, 0.84)]]
    s[2] = [_arc(0.5, 0.32, 0.2, 0.17, np.pi, 2 * np.pi, 10),
            [(0.7, 0.32), (0.3, 0.84)], [(0.3, 0.84), (0.72, 0.84)]]
    s[3] = [_arc(0.47, 0.32, 0.2, 0.16, -0.6 * np.pi, 0.5 * np.pi, 10),
            _arc(0.47, 0.66, 0.22, 0.18, -0.5 * np.pi, 0.6 * np.pi, 10)]
    s[4] = [[(0.6, 0.16), (0.28, 0.62)], [(0.28, 0.62), (0.76, 0.62)],
            [(0.6, 0.16), (0.6, 0.84)]]
    s[5] = [[(0.7, 0.16), (0.34, 0.16)], [(0.34, 0.16), (0.32, 0.48)],
            _arc(0.48, 0.65, 0.21, 0.19, -0.5 * np.pi, 0.75 * np.pi, 12)]
    s[6] = [_arc(0.52, 0.36, 0.26, 0.3, 0.75 * np.pi, 1.45 * np.pi, 10),
            _arc(0.5, 0.65, 0.18, 0.18, 0, 2 * np.pi, 16)]
    s[7] = [[(0.3, 0.16), (0.72, 0.16)], [(0.72, 0.16), (0.42, 0.84)]]
    s[8] = [_arc(0.5, 0.33, 0.16, 0.16, 0, 2 * np.pi, 16),
            _arc(0.5, 0.67, 0.2, 0.18, 0, 2 * np.pi, 16)]
    s[9] = [_arc(0.52, 0.34, 0.18, 0.17, 0, 2 * np.pi, 16),
            [(0.7, 0.34), (0.62, 0.84)]]
    return {d: _strokes_to_segments(strokes) for d, strokes in s.items()}


def render(segments, rng, size=28, thickness=1.1):
    """Rasterize jittered strokes: intensity falls off with segment distance."""
    angle = rng.uniform(-0.18, 0.18)
    scale = rng.uniform(0.85, 1.15)
    shear = rng.uniform(-0.12, 0.12)
    dx, dy = rng.uniform(-0.09, 0.09, size=2)
    c, sn = np.cos(angle), np.sin(angle)
    mat = np.array([[c, -sn], [sn, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    pts = (segments.reshape(-1, 2) - 0.5) @ mat.T + 0.5 + [dx, dy]
    seg = (pts * size).reshape(-1, 2, 2)

    ys, xs = np.mgrid[0:size, 0:size]
    pix = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    a, b = seg[:, 0], seg[:, 1]
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = pix[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.sqrt(((pix[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)
    img = np.clip(1.35 * np.exp(-0.5 * (d / thickness) ** 2), 0.0, 1.0)
    img += rng.normal(0, 0.03, img.shape)
    return (np.clip(img, 0, 1).reshape(size, size) * 255).astype(np.uint8)


def make_dataset(n: int, seed: int):
    rng = np.random.default_rng(seed)
    skel = digit_skeletons()
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = np.stack([render(skel[int(d)], rng) for d in labels])
    return images, labels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/synthetic", help="output directory")
    ap.add_argument("--train", type=int, default=10000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    tr_images, tr_labels = make_dataset(args.train, args.seed)
    te_images, te_labels = make_dataset(args.test, args.seed + 1)
    save_idx(os.path.join(args.out, "train-images-idx3-ubyte"),
             os.path.join(args.out, "train-labels-idx1-ubyte"), tr_images, tr_labels)
    save_idx(os.path.join(args.out, "t10k-images-idx3-ubyte"),
             os.path.join(args.out, "t10k-labels-idx1-ubyte"), te_images, te_labels)
    print(f"wrote {args.train} train / {args.test} test digits to {args.out}")


if __name__ == "__main__":
    main()
