"""Regenerate the bundled test images in ``src/fxsolve/data``.

``planet.pgm``: 128x102 banded planet with a tilted ring on a dark sky.
``sprite.pgm``: 16x16 four-level pixel-art figure (levels 0, 64, 128, 192).
"""
from pathlib import Path

import numpy as np

from fxsolve.imageio import write_pgm

DATA = Path(__file__).resolve().parents[1] / "src" / "fxsolve" / "data"

SPRITE = """
................
.....333333.....
....33333333....
....22122122....
...2212212222...
...2211222222...
....22222222....
.....222222.....
....11311311....
...1113113111...
..222333333222..
..22.333333.22..
.....333333.....
....333..333....
...111....111...
..1111....1111..
"""


def planet(width=128, height=102):
    y, x = np.mgrid[0:height, 0:width].astype(float)
    cx, cy, radius = width / 2 - 0.5, height / 2 - 0.5, 30.0
    u, v = (x - cx) / radius, (y - cy) / radius
    r2 = u ** 2 + v ** 2
    img = np.zeros((height, width))
    disk = r2 <= 1.0
    # limb darkening times latitude bands
    shade = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    bands = 0.75 + 0.2 * np.cos(9.0 * v) + 0.05 * np.cos(23.0 * v)
    img[disk] = (0.25 + 0.6 * shade * bands)[disk]
    # ring: ellipse annulus tilted by 20 degrees, hidden behind the upper half of the disk
    ang = np.deg2rad(20.0)
    ru = (u * np.cos(ang) + v * np.sin(ang)) / 2.1
    rv = (-u * np.sin(ang) + v * np.cos(ang)) / 0.55
    rr = np.sqrt(ru ** 2 + rv ** 2)
    ring = (rr > 0.7) & (rr < 1.0) & ~(disk & (rv < 0))
    img[ring] = 0.45 + 0.25 * np.cos(18.0 * rr[ring])
    # a few stars
    rng = np.random.default_rng(7)
    sky = ~disk & ~ring
    idx = rng.choice(np.flatnonzero(sky), 25, replace=False)
    img.flat[idx] = rng.uniform(0.3, 0.9, idx.size)
    return np.clip(np.round(img * 255), 0, 255).astype(np.int64)


def sprite():
    rows = [line for line in SPRITE.strip().splitlines()]
    levels = {".": 0, "1": 1, "2": 2, "3": 3}
    return np.array([[levels[c] * 64 for c in row] for row in rows], dtype=np.int64)


if __name__ == "__main__":
    DATA.mkdir(parents=True, exist_ok=True)
    write_pgm(DATA / "planet.pgm", planet())
    write_pgm(DATA / "sprite.pgm", sprite())
