"""Polar ray-casting encoding of a head surface as a 28x28 distance map.

Rows are elevation bins above the ear plane (row 0 lowest), columns are
azimuth bins starting at the forward axis and turning towards the patient's
left.  Each pixel samples the bin centre: elevation ``(i + 0.5) * 90/28``
degrees, azimuth ``(j + 0.5) * 360/28`` degrees.  The pixel value is the
distance from the frame origin to the farthest surface hit along the ray,
divided by ``scale_mm`` and clamped to [0, 1]; rays without a hit give 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import serialization
from ._validation import MAP_SIZE, check_maps
from .exceptions import DegenerateLandmarks, EmptyMesh, ValidationError
from .geometry import LandmarkSet, SimilarityTransform, TriangleMesh

DEFAULT_SCALE_MM = 300.0


@dataclass(frozen=True, eq=False)
class HeadFrame:
    origin: np.ndarray
    lateral: np.ndarray
    forward: np.ndarray
    vertical: np.ndarray

    def __post_init__(self):
        basis = np.stack([self.lateral, self.forward, self.vertical])
        if not np.allclose(basis @ basis.T, np.eye(3), atol=1e-9):
            raise ValidationError("head frame axes must be orthonormal")
        if np.linalg.det(basis) < 0:
            raise ValidationError("head frame must be right-handed")

    @property
    def basis(self) -> np.ndarray:
        """Rows: lateral, forward, vertical."""
        return np.stack([self.lateral, self.forward, self.vertical])

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.origin) @ self.basis.T

    def transformed(self, t: SimilarityTransform) -> "HeadFrame":
        r = t.rotation
        return HeadFrame(t.apply(self.origin), r @ self.lateral, r @ self.forward, r @ self.vertical)


def head_frame_from_landmarks(lms: LandmarkSet) -> HeadFrame:
    """Origin between the ears, lateral axis left->right ear, forward towards the face.

    Raises :class:`DegenerateLandmarks` for coincident ears, a face landmark on
    the ear axis, or left/right labels that contradict each other or the
    face geometry (a mirrored labelling).
    """
    s = lms.schema
    left, right = lms[f"{s.ear}_left"], lms[f"{s.ear}_right"]
    span = right - left
    if np.linalg.norm(span) < 1e-9:
        raise DegenerateLandmarks("ear landmarks coincide")
    origin = 0.5 * (left + right)
    lateral = span / np.linalg.norm(span)
    fwd = lms[s.forward] - origin
    fwd = fwd - (fwd @ lateral) * lateral
    if np.linalg.norm(fwd) < 1e-9:
        raise DegenerateLandmarks("forward landmark lies on the ear axis")
    forward = fwd / np.linalg.norm(fwd)
    vertical = np.cross(lateral, forward)
    eye_span = lms[f"{s.eye}_right"] - lms[f"{s.eye}_left"]
    if eye_span @ lateral <= 0:
        raise DegenerateLandmarks("left/right labels of ear and eye landmarks disagree")
    if (lms[s.forward] - lms[s.below]) @ vertical <= 0:
        raise DegenerateLandmarks("mirrored landmark labelling (face points below the forward landmark appear above)")
    return HeadFrame(origin, lateral, forward, vertical)


def ray_directions(size: int = MAP_SIZE) -> np.ndarray:
    """Unit directions in frame coordinates (lateral, forward, vertical), shape (size, size, 3)."""
    elev = (np.arange(size) + 0.5) * (0.5 * np.pi / size)
    azim = (np.arange(size) + 0.5) * (2 * np.pi / size)
    ce, se = np.cos(elev)[:, None], np.sin(elev)[:, None]
    ca, sa = np.cos(azim)[None, :], np.sin(azim)[None, :]
    return np.stack([-ce * sa, ce * ca, np.broadcast_to(se, (size, size))], axis=-1)


def farthest_hits(vertices: np.ndarray, triangles: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Farthest positive ray parameter per direction for rays from the origin (0 if no hit).

    Triangles are pre-filtered with an angular cone around their centroid
    direction; the exact Moller-Trumbore test runs on the survivors only.
    """
    tri = vertices[triangles]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    norms = np.linalg.norm(tri, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = tri / norms[..., None]
        axis = unit.sum(axis=1)
        axis_n = np.linalg.norm(axis, axis=1)
        axis = axis / axis_n[:, None]
        cos_r = np.einsum("tkj,tj->tk", unit, axis).min(axis=1)
    always = ~np.isfinite(cos_r) | (cos_r <= 0.05) | np.any(norms < 1e-9, axis=1) | (axis_n < 1e-9)
    axis = np.where(always[:, None], 0.0, axis)
    thresh = np.where(always, -np.inf, cos_r - 1e-9)
    cand = dirs @ axis.T >= thresh[None, :]
    ri, ti = np.nonzero(cand)

    d = dirs[ri]
    e1 = b[ti] - a[ti]
    e2 = c[ti] - a[ti]
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = -a[ti]
    u = np.einsum("ij,ij->i", s, pvec) * inv
    qvec = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    eps = 1e-12
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > 1e-9)
    out = np.zeros(len(dirs))
    np.maximum.at(out, ri[hit], t[hit])
    return out


def mesh_to_distance_map(mesh: TriangleMesh, frame: HeadFrame, scale_mm: float = DEFAULT_SCALE_MM,
                         clip: bool = True) -> np.ndarray:
    """Encode ``mesh`` as a (28, 28) distance map in ``frame``."""
    if mesh.triangle_count == 0:
        raise EmptyMesh("mesh has no triangles")
    if not scale_mm > 0:
        raise ValidationError("scale_mm must be positive")
    local = frame.to_local(mesh.vertices)
    dirs = ray_directions().reshape(-1, 3)
    vals = farthest_hits(local, mesh.triangles, dirs).reshape(MAP_SIZE, MAP_SIZE) / scale_mm
    return np.clip(vals, 0.0, 1.0) if clip else vals


def horizontal_cyclic_shift(image, pixels: int) -> np.ndarray:
    """Rotate columns (azimuth wraps); works on (28, 28) or stacked maps."""
    return np.roll(np.asarray(image), int(pixels), axis=-1)


def landmark_anchor_point(vertices: np.ndarray, anchor) -> np.ndarray:
    """``anchor`` is a vertex id or a list of ``(vertex id, weight)`` pairs with weights summing to 1."""
    if np.ndim(anchor) == 0:
        return vertices[int(anchor)]
    ids = np.array([int(i) for i, _ in anchor])
    w = np.array([float(x) for _, x in anchor])
    return w @ vertices[ids]


def landmarks_from_vertices(mesh: TriangleMesh, landmark_vertices: dict, schema=None) -> LandmarkSet:
    pts = {name: landmark_anchor_point(mesh.vertices, a) for name, a in landmark_vertices.items()}
    return LandmarkSet(pts) if schema is None else LandmarkSet(pts, schema)


class DistanceMapEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer: ``(mesh, landmarks)`` pairs -> (n, 28, 28) maps."""

    def __init__(self, scale_mm=DEFAULT_SCALE_MM):
        self.scale_mm = scale_mm

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        out = [mesh_to_distance_map(mesh, head_frame_from_landmarks(lms), self.scale_mm) for mesh, lms in X]
        return np.stack(out) if out else np.zeros((0, MAP_SIZE, MAP_SIZE))


def write_pgm(image, path) -> None:
    """8-bit binary PGM (P5), value ``round(pixel * 255)``, row 0 written first."""
    img = check_maps(image)[0]
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValidationError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w) / 255.0


def save_maps(path, maps, labels=None, ids=None, meta=None) -> None:
    """Stack of maps as little-endian float32 in the shared container (kind ``distance_maps``)."""
    arr = check_maps(maps, allow_empty=True)
    header = dict(meta or {})
    header["ids"] = list(ids) if ids is not None else None
    arrays = {"maps": arr.astype("<f4")}
    if labels is not None:
        arrays["labels"] = np.asarray(labels, dtype="<i8")
    serialization.save(path, "distance_maps", header, arrays)


def load_maps(path):
    """Return ``(maps float64 (n, 28, 28), labels or None, meta)``."""
    _, meta, arrays = serialization.load(path, "distance_maps")
    return arrays["maps"].astype(float), arrays.get("labels"), meta
