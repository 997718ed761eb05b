"""Procedural fundus-like images for tests and demos.

Not a substitute for real photographs: a reddish disc with a bright optic
disc, a darker macula and a branching vessel tree, enough structure for the
high-pass target to be non-trivial.
"""

import cv2
import numpy as np

from .data import FundusImage, estimate_fov_mask


def _vessel_tree(canvas, rng, start, angle, length, width, depth):
    if depth == 0 or length < 4:
        return
    x, y = start
    pts = [(x, y)]
    for _ in range(8):
        angle += rng.normal(0, 0.25)
        x += np.cos(angle) * length / 8
        y += np.sin(angle) * length / 8
        pts.append((x, y))
    pts = np.round(np.array(pts)).astype(np.int32)
    cv2.polylines(canvas, [pts], False, 1.0, thickness=max(1, int(round(width))), lineType=cv2.LINE_AA)
    mid = tuple(pts[len(pts) // 2])
    end = tuple(pts[-1])
    for branch_start in (mid, end):
        _vessel_tree(canvas, rng, branch_start, angle + rng.choice([-1, 1]) * rng.uniform(0.3, 0.8),
                     length * 0.65, width * 0.7, depth - 1)


def synthetic_fundus(side: int = 256, seed: int = 0) -> FundusImage:
    """Return a unit-range :class:`FundusImage` of ``side`` x ``side`` pixels."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    c = (side - 1) / 2
    radius = side * 0.46
    d = np.hypot(yy - c, xx - c) / radius

    base = np.array([0.78, 0.36, 0.16], np.float32) * rng.uniform(0.85, 1.1)
    img = np.ones((side, side, 3), np.float32) * base
    img *= (1.0 - 0.25 * d**2)[..., None]

    od = (c + rng.uniform(0.25, 0.4) * radius * rng.choice([-1, 1]), c + rng.uniform(-0.1, 0.1) * radius)
    od_r = radius * 0.14
    od_d = np.hypot(xx - od[0], yy - od[1]) / od_r
    img += (np.exp(-od_d**2 * 1.5) * 0.45)[..., None] * np.array([1.0, 0.9, 0.6], np.float32)

    mac = (2 * c - od[0], od[1])
    mac_d = np.hypot(xx - mac[0], yy - mac[1]) / (radius * 0.2)
    img *= (1.0 - 0.3 * np.exp(-mac_d**2))[..., None]

    vessels = np.zeros((side, side), np.float32)
    for k in range(4):
        angle = k * np.pi / 2 + rng.uniform(-0.5, 0.5)
        _vessel_tree(vessels, rng, od, angle, radius * 0.9, side / 80, depth=4)
    vessels = cv2.GaussianBlur(vessels, (0, 0), max(0.6, side / 400))
    img *= (1.0 - 0.55 * vessels[..., None] * np.array([0.6, 1.0, 1.0], np.float32))

    img += rng.normal(0, 0.005, img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    img[d > 1.0] = 0.0
    return FundusImage(img, estimate_fov_mask(img), "unit").masked()
