"""Triangle meshes, landmark sets, similarity alignment and GPA."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import (
    CollinearLandmarks,
    DegenerateMesh,
    InsufficientSamples,
    NameMismatch,
    NoConvergence,
    ValidationError,
)

MIDLINE_LANDMARKS = ("nasion", "glabella", "pronasale", "subnasale")
BILATERAL_LANDMARKS = ("tragion", "exocanthion", "cheilion")


@dataclass(frozen=True)
class LandmarkSchema:
    """Names of the 4 midline and 3 bilateral landmarks.

    Bilateral names expand to ``<name>_left`` / ``<name>_right``.  The head
    frame uses ``ear`` for the origin/lateral axis, ``forward`` for the
    forward axis, ``eye`` and ``below`` for mirror detection.
    """

    midline: tuple = MIDLINE_LANDMARKS
    bilateral: tuple = BILATERAL_LANDMARKS
    ear: str = "tragion"
    forward: str = "nasion"
    eye: str = "exocanthion"
    below: str = "subnasale"

    @property
    def names(self) -> tuple:
        out = list(self.midline)
        for name in self.bilateral:
            out += [f"{name}_left", f"{name}_right"]
        return tuple(out)


DEFAULT_SCHEMA = LandmarkSchema()


class LandmarkSet(Mapping):
    """Ten named 3D points (mm), read-only mapping ``name -> (3,) array``."""

    def __init__(self, points: Mapping[str, Sequence[float]], schema: LandmarkSchema = DEFAULT_SCHEMA):
        expected = schema.names
        missing = [n for n in expected if n not in points]
        extra = [n for n in points if n not in expected]
        if missing or extra or len(points) != 10:
            raise NameMismatch(f"landmark names do not match schema (missing={missing}, extra={extra})")
        arr = np.array([np.asarray(points[n], dtype=float) for n in expected])
        if arr.shape != (10, 3) or not np.all(np.isfinite(arr)):
            raise ValidationError("landmarks must be 10 finite 3D points")
        arr.flags.writeable = False
        self.schema = schema
        self._names = expected
        self._points = arr

    @property
    def names(self) -> tuple:
        return self._names

    @property
    def array(self) -> np.ndarray:
        """(10, 3) array in schema order."""
        return self._points

    def __getitem__(self, name):
        try:
            return self._points[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __iter__(self):
        return iter(self._names)

    def __len__(self):
        return len(self._names)

    def __repr__(self):
        return f"LandmarkSet({len(self)} points)"

    def transformed(self, transform: "SimilarityTransform") -> "LandmarkSet":
        pts = transform.apply(self._points)
        return LandmarkSet(dict(zip(self._names, pts)), self.schema)

    def to_json(self, path) -> None:
        data = {n: [float(v) for v in p] for n, p in zip(self._names, self._points)}
        Path(path).write_text(json.dumps(data, indent=2) + "\n")

    @classmethod
    def from_json(cls, path, schema: LandmarkSchema = DEFAULT_SCHEMA) -> "LandmarkSet":
        return cls(json.loads(Path(path).read_text()), schema)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (N, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("vertices must be finite")
        if t.size:
            if t.min() < 0 or t.max() >= len(v):
                raise ValidationError("triangle index out of range")
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ValidationError("triangle with repeated vertex index")
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def point_count(self) -> int:
        return len(self.vertices)

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same topology, new vertex positions."""
        return TriangleMesh(np.asarray(vertices, dtype=float).reshape(-1, 3), self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted (E, 2)."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def is_closed_manifold(self) -> bool:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        tr = np.array(self.translation, dtype=float)
        if r.shape != (3, 3) or tr.shape != (3,):
            raise ValidationError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValidationError("rotation must be proper orthonormal")
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * p @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(rt, 1.0 / self.scale, -(rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.rotation @ other.rotation,
            self.scale * other.scale,
            self.scale * self.rotation @ other.translation + self.translation,
        )


def _fit_similarity(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """Closed-form least-squares similarity (Umeyama).  Returns (R, s, t)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise CollinearLandmarks("source points are collinear or coincident")
    u, s, vt = np.linalg.svd(xd.T @ xs)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = (u * d) @ vt
    scale = float((s * d).sum() / (xs**2).sum()) if with_scale else 1.0
    trans = mu_d - scale * rot @ mu_s
    return rot, scale, trans


def similarity_procrustes(source: LandmarkSet, target: LandmarkSet) -> SimilarityTransform:
    """Least-squares similarity mapping ``source`` landmarks onto ``target``."""
    if tuple(source.names) != tuple(target.names):
        raise NameMismatch("landmark sets have different names")
    rot, scale, trans = _fit_similarity(source.array, target.array, with_scale=True)
    return SimilarityTransform(rot, scale, trans)


def rigid_procrustes(source_points, target_points) -> SimilarityTransform:
    """Least-squares rotation + translation (scale fixed at 1)."""
    src = np.asarray(source_points, dtype=float)
    dst = np.asarray(target_points, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValidationError("point arrays must both be (N, 3)")
    rot, _, trans = _fit_similarity(src, dst, with_scale=False)
    return SimilarityTransform(rot, 1.0, trans)


def apply_transform(mesh: TriangleMesh, transform: SimilarityTransform) -> TriangleMesh:
    return mesh.with_vertices(transform.apply(mesh.vertices))


@dataclass
class GPAResult:
    aligned: list
    mean: TriangleMesh
    n_iter: int
    converged: bool


def generalized_procrustes(meshes: Sequence[TriangleMesh], tol: float = 1e-7, max_iter: int = 100) -> GPAResult:
    """Iteratively align meshes (rotation + translation, no scaling) to their mean.

    The reference starts as the first mesh, centred.  Iteration stops when the
    mean vertex displacement between successive mean shapes drops below
    ``tol`` (mm).  Hitting ``max_iter`` emits :class:`NoConvergence` and
    returns the partial result with ``converged=False``.
    """
    if len(meshes) < 2:
        raise InsufficientSamples("generalized Procrustes needs at least 2 meshes")
    first = meshes[0]
    for m in meshes[1:]:
        if m.point_count != first.point_count or not np.array_equal(m.triangles, first.triangles):
            raise ValidationError("meshes must share point count and topology")
    shapes = [m.vertices for m in meshes]
    mean = shapes[0] - shapes[0].mean(axis=0)
    aligned = shapes
    for it in range(1, max_iter + 1):
        aligned = [rigid_procrustes(s, mean).apply(s) for s in shapes]
        new_mean = np.mean(aligned, axis=0)
        new_mean -= new_mean.mean(axis=0)
        shift = np.linalg.norm(new_mean - mean, axis=1).mean()
        mean = new_mean
        if shift < tol:
            return GPAResult([first.with_vertices(a) for a in aligned], first.with_vertices(mean), it, True)
    warnings.warn(f"GPA did not converge in {max_iter} iterations", NoConvergence, stacklevel=2)
    return GPAResult([first.with_vertices(a) for a in aligned], first.with_vertices(mean), max_iter, False)


def vertex_area_weights(mesh: TriangleMesh) -> np.ndarray:
    """One third of the summed incident triangle areas, per vertex."""
    if mesh.triangle_count == 0:
        raise DegenerateMesh("mesh has no triangles")
    areas = mesh.triangle_areas()
    if not areas.sum() > 0:
        raise DegenerateMesh("mesh has zero surface area")
    w = np.zeros(mesh.point_count)
    for k in range(3):
        w += np.bincount(mesh.triangles[:, k], weights=areas / 3.0, minlength=mesh.point_count)
    return w


def read_obj(path) -> TriangleMesh:
    """ASCII OBJ: ``v x y z`` and ``f i j k`` records (1-based, ``i/t/n`` tolerated)."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def mesh_from_arrays(vertices: Iterable, triangles: Iterable) -> TriangleMesh:
    return TriangleMesh(np.asarray(vertices, dtype=float), np.asarray(triangles, dtype=np.int64))
