"""
Synthetic meshes used to build test and demo scenes.
All closed primitives are outward oriented.
"""

import numpy as np
import trimesh

from geometry import TriMesh


def _refined(mesh: trimesh.Trimesh, subdivisions: int) -> TriMesh:
    for _ in range(subdivisions):
        mesh = mesh.subdivide()
    return TriMesh.from_trimesh(mesh)


def box(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), subdivisions: int = 0) -> TriMesh:
    """Axis-aligned box; each subdivision splits every triangle in four"""
    bounds = np.array([lo, hi], dtype=float)
    return _refined(trimesh.creation.box(bounds=bounds), subdivisions)


def grid_plane(x_range=(0.0, 1.0), y_range=(0.0, 1.0), z: float = 0.0,
               divisions: int = 4, facing_up: bool = True) -> TriMesh:
    """Open rectangular sheet at height z, divisions x divisions quads"""
    n = divisions
    xs = np.linspace(x_range[0], x_range[1], n + 1)
    ys = np.linspace(y_range[0], y_range[1], n + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.reshape(-1), gy.reshape(-1), np.full(gx.size, float(z))])
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a = (i * (n + 1) + j).reshape(-1)
    b = a + n + 1
    quads = np.column_stack([a, b, b + 1, a + 1])
    tris = trimesh.geometry.triangulate_quads(quads)
    if not facing_up:
        tris = tris[:, ::-1]
    return TriMesh(pts, tris)


def icosphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), subdivisions: int = 3) -> TriMesh:
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    sphere.apply_translation(np.asarray(center, dtype=float))
    return TriMesh.from_trimesh(sphere)


def cylinder(p0=(0.0, 0.0, 0.0), p1=(0.0, 0.0, 1.0), radius: float = 0.1,
             segments: int = 16) -> TriMesh:
    """Capped cylinder between two points"""
    segment = np.array([p0, p1], dtype=float)
    return TriMesh.from_trimesh(trimesh.creation.cylinder(radius=radius, segment=segment,
                                                          sections=segments))
