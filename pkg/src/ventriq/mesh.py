"""Triangle-mesh helpers: normals, plane cross-sections, polygon filling."""
from __future__ import annotations

import numpy as np


def vertex_normals(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; zero for vertices without incident triangles."""
    p = np.asarray(points, dtype=float)
    tri = np.asarray(triangles)
    fn = np.cross(p[tri[:, 1]] - p[tri[:, 0]], p[tri[:, 2]] - p[tri[:, 0]])  # |fn| = 2*area
    n = np.zeros_like(p)
    for c in range(3):
        np.add.at(n, tri[:, c], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def boundary_vertices(triangles: np.ndarray) -> np.ndarray:
    """Sorted indices of vertices on edges used by exactly one triangle."""
    tri = np.asarray(triangles)
    edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])


def slice_mesh(points: np.ndarray, triangles: np.ndarray, z: float):
    """Cross-section of a mesh with the plane ``points[:, 2] == z``.

    Returns ``(loops, open_chains)``: closed loops as (M, 2) arrays of xy
    coordinates and the number of chains that failed to close (an open mesh
    border crossed the plane).
    """
    p = np.asarray(points, dtype=float)
    tri = np.asarray(triangles)
    d = p[:, 2] - z
    above = d >= 0
    ta = above[tri]
    mixed = ta.any(axis=1) & ~ta.all(axis=1)
    if not mixed.any():
        return [], 0
    tri = tri[mixed]
    ta = ta[mixed]
    # the two edges of each triangle that straddle the plane
    e = np.stack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=1)  # (T,3,2)
    ea = np.stack([ta[:, [0, 1]], ta[:, [1, 2]], ta[:, [2, 0]]], axis=1)
    crossing = ea[..., 0] != ea[..., 1]
    seg_edges = e[crossing].reshape(-1, 2, 2)
    seg_edges = np.sort(seg_edges, axis=2)

    keys = {}
    coords = []

    def key_of(i, j):
        k = (int(i), int(j))
        if k not in keys:
            di, dj = d[i], d[j]
            t = di / (di - dj)
            q = p[i] + t * (p[j] - p[i])
            keys[k] = len(coords)
            coords.append(q[:2])
        return keys[k]

    segs = [(key_of(*s[0]), key_of(*s[1])) for s in seg_edges]
    adj = {}
    for si, (u, v) in enumerate(segs):
        adj.setdefault(u, []).append(si)
        adj.setdefault(v, []).append(si)
    used = np.zeros(len(segs), dtype=bool)
    loops, open_chains = [], 0
    for s0 in range(len(segs)):
        if used[s0]:
            continue
        used[s0] = True
        start, cur = segs[s0]
        chain = [start, cur]
        closed = False
        # walk forward
        while True:
            nxt = [s for s in adj[cur] if not used[s]]
            if not nxt:
                closed = cur == start
                break
            s = nxt[0]
            used[s] = True
            u, v = segs[s]
            cur = v if u == cur else u
            if cur == start:
                closed = True
                break
            chain.append(cur)
        if closed:
            loops.append(np.array([coords[c] for c in chain]))
        else:
            # finish the other direction so the whole open chain is consumed
            cur = start
            while True:
                nxt = [s for s in adj[cur] if not used[s]]
                if not nxt:
                    break
                s = nxt[0]
                used[s] = True
                u, v = segs[s]
                cur = v if u == cur else u
            open_chains += 1
    return loops, open_chains


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule inside test for arrays of query coordinates."""
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        if b == d:
            continue
        cond = (b > py) != (d > py)
        xc = a + (py - b) * (c - a) / (d - b)
        inside ^= cond & (px < xc)
    return inside


def fill_loops(loops, nx: int, ny: int, sx: float, sy: float) -> np.ndarray:
    """Even-odd fill of loops (slice-plane mm) onto an (nx, ny) grid of voxel centres."""
    mask = np.zeros((nx, ny), dtype=bool)
    for poly in loops:
        lo = np.floor(poly.min(axis=0) / (sx, sy)).astype(int)
        hi = np.ceil(poly.max(axis=0) / (sx, sy)).astype(int)
        i0, j0 = max(lo[0], 0), max(lo[1], 0)
        i1, j1 = min(hi[0], nx - 1), min(hi[1], ny - 1)
        if i1 < i0 or j1 < j0:
            continue
        gx, gy = np.meshgrid(np.arange(i0, i1 + 1) * sx, np.arange(j0, j1 + 1) * sy, indexing="ij")
        mask[i0:i1 + 1, j0:j1 + 1] ^= points_in_polygon(gx, gy, poly)
    return mask


def capped_volume(points: np.ndarray, triangles: np.ndarray) -> float:
    """Enclosed volume (mm^3) of a surface whose open border loop is capped by a fan to its centroid.

    Orientation-independent (absolute value of the divergence-theorem sum).
    """
    p = np.asarray(points, dtype=float)
    tri = np.asarray(triangles)
    ring = boundary_vertices(tri)
    c = p[ring].mean(axis=0) if ring.size else p[np.unique(tri)].mean(axis=0)
    # signed tetra volumes against the cap centroid; the cap itself contributes zero
    a, b, d = p[tri[:, 0]] - c, p[tri[:, 1]] - c, p[tri[:, 2]] - c
    return abs(float(np.einsum("ij,ij->i", a, np.cross(b, d)).sum()) / 6.0)
