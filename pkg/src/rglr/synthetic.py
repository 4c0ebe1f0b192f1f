"""Synthetic test surfaces with exact geometry, sampled on jittered grids.

Jittered (stratified) sampling keeps point spacing close to uniform, like a
range scanner, and avoids the near-coincident pairs of i.i.d. sampling.
"""

from __future__ import annotations

import numpy as np


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def jittered_rect(rng, width, height, spacing):
    """(u, v) samples covering [0, width] x [0, height], one per grid cell."""
    nu = max(int(round(width / spacing)), 1)
    nv = max(int(round(height / spacing)), 1)
    hu, hv = width / nu, height / nv
    gu, gv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    u = (gu.ravel() + rng.random(gu.size)) * hu
    v = (gv.ravel() + rng.random(gv.size)) * hv
    return u, v


def plane(n=10_000, side=None, seed=0):
    """Square patch of z = 0 with about ``n`` points; side defaults to diagonal 100."""
    rng = _rng(seed)
    side = 100.0 / np.sqrt(2.0) if side is None else side
    u, v = jittered_rect(rng, side, side, side / np.sqrt(n))
    return np.column_stack([u, v, np.zeros_like(u)])


def wave(n=4_000, side=60.0, amplitude=4.0, period=30.0, seed=0):
    """Smooth height field z = a sin(2 pi x / period) cos(2 pi y / period)."""
    rng = _rng(seed)
    u, v = jittered_rect(rng, side, side, side / np.sqrt(n))
    z = amplitude * np.sin(2 * np.pi * u / period) * np.cos(2 * np.pi * v / period)
    return np.column_stack([u, v, z])


def cube(n_per_face=600, edge=40.0, seed=0):
    """Surface of an axis-aligned cube. Returns points and per-point face ids."""
    rng = _rng(seed)
    spacing = edge / np.sqrt(n_per_face)
    pts, face = [], []
    for axis in range(3):
        for side in (0.0, edge):
            u, v = jittered_rect(rng, edge, edge, spacing)
            p = np.zeros((len(u), 3))
            others = [a for a in range(3) if a != axis]
            p[:, others[0]], p[:, others[1]], p[:, axis] = u, v, side
            pts.append(p)
            face.append(np.full(len(u), 2 * axis + int(side > 0)))
    return np.vstack(pts), np.concatenate(face)


def sphere(n=2_000, radius=30.0, seed=0):
    """Near-uniform sphere samples from a jittered Fibonacci lattice."""
    rng = _rng(seed)
    i = np.arange(n) + 0.5 * rng.random(n)
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + np.sqrt(5.0)) * np.arange(n)
    r = np.sqrt(np.clip(1.0 - z**2, 0.0, 1.0))
    return radius * np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def fandisk_like(n=20_000, size=(60.0, 40.0, 20.0), groove_radius=8.0, seed=0):
    """Piecewise-smooth CAD-like part: a box whose top face has a half-cylinder groove.

    Planar faces meet at sharp edges; the groove adds a curved patch with
    two more creases. ``n`` is approximate.
    """
    rng = _rng(seed)
    lx, ly, lz = size
    r = groove_radius
    yc = ly / 2.0
    groove_len = np.pi * r
    flat_top = ly - 2 * r
    area = (lx * ly + 2 * lx * lz + 2 * (ly * lz - 0.5 * np.pi * r**2)
            + lx * (flat_top + groove_len))
    h = np.sqrt(area / n)
    parts = []

    u, v = jittered_rect(rng, lx, ly, h)  # bottom
    parts.append(np.column_stack([u, v, np.zeros_like(u)]))
    for y0 in (0.0, ly):  # long sides
        u, v = jittered_rect(rng, lx, lz, h)
        parts.append(np.column_stack([u, np.full_like(u, y0), v]))
    for x0 in (0.0, lx):  # end caps with the groove notch
        u, v = jittered_rect(rng, ly, lz, h)
        keep = (u - yc) ** 2 + (v - lz) ** 2 > r**2
        parts.append(np.column_stack([np.full(keep.sum(), x0), u[keep], v[keep]]))
    for y0 in (0.0, yc + r):  # flat top strips
        u, v = jittered_rect(rng, lx, yc - r, h)
        parts.append(np.column_stack([u, y0 + v, np.full_like(u, lz)]))
    u, v = jittered_rect(rng, lx, groove_len, h)  # groove, by arc length
    theta = v / r
    parts.append(np.column_stack([u, yc - r * np.cos(theta), lz - r * np.sin(theta)]))
    return np.vstack(parts)
