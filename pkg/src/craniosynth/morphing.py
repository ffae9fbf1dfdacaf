"""Template morphing: closest-point projection with cotangent-Laplacian regularization."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .exceptions import EmptyTarget, SingularSystem, ValidationError
from .geometry import (
    LandmarkSet,
    TriangleMesh,
    apply_transform,
    rigid_procrustes,
    similarity_procrustes,
)


@dataclass(frozen=True)
class MorphConfig:
    stiffness_high: float = 100.0
    stiffness_low: float = 1.0
    iterations_per_pass: int = 10
    correspondence_rejection_distance: float = 10.0
    rigid_between_passes: bool = True

    def __post_init__(self):
        if not self.stiffness_high > self.stiffness_low > 0:
            raise ValidationError("need stiffness_high > stiffness_low > 0")
        if self.iterations_per_pass < 1:
            raise ValidationError("iterations_per_pass must be >= 1")
        if not self.correspondence_rejection_distance > 0:
            raise ValidationError("correspondence_rejection_distance must be positive")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "MorphConfig":
        data = dict(data)
        if "reject_dist" in data:
            data["correspondence_rejection_distance"] = data.pop("reject_dist")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "MorphConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _closest_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p; all (K, 3).  Ericson's region test."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + ab * v[:, None] + ac * w[:, None]

        done = np.zeros(len(p), dtype=bool)

        def put(mask, value):
            nonlocal out
            m = mask & ~done
            out = np.where(m[:, None], value, out)
            done[m] = True

        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[:, None])
        put((d6 >= 0) & (d5 <= d6), c)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[:, None])
        e43, e56 = d4 - d3, d5 - d6
        t_bc = np.where(e43 + e56 != 0, e43 / (e43 + e56), 0.0)
        put((va <= 0) & (e43 >= 0) & (e56 >= 0), b + (c - b) * t_bc[:, None])
    return out


def closest_points_on_mesh(points, mesh: TriangleMesh):
    """Exact closest surface points.

    Returns ``(closest (P, 3), distance (P,), triangle index (P,))``.  Candidate
    triangles are pruned with bounding spheres against the nearest-vertex
    distance, which is an upper bound on the true distance.
    """
    if mesh.triangle_count == 0:
        raise EmptyTarget("target mesh has no triangles")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.vertices[mesh.triangles]
    centroids = tri.mean(axis=1)
    radii = np.linalg.norm(tri - centroids[:, None, :], axis=2).max(axis=1)
    used = np.unique(mesh.triangles)
    ub, _ = cKDTree(mesh.vertices[used]).query(pts)
    ctree = cKDTree(centroids)
    cand = ctree.query_ball_point(pts, ub + radii.max() + 1e-9)
    pi = np.repeat(np.arange(len(pts)), [len(c) for c in cand])
    ti = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand]) if len(pts) else np.zeros(0, np.int64)
    keep = np.linalg.norm(pts[pi] - centroids[ti], axis=1) - radii[ti] <= ub[pi] + 1e-9
    pi, ti = pi[keep], ti[keep]
    q = _closest_on_triangles(pts[pi], tri[ti, 0], tri[ti, 1], tri[ti, 2])
    d = np.linalg.norm(q - pts[pi], axis=1)
    order = np.lexsort((ti, d, pi))
    first = order[np.r_[True, pi[order][1:] != pi[order][:-1]]]
    closest = np.empty_like(pts)
    dist = np.empty(len(pts))
    tidx = np.empty(len(pts), dtype=np.int64)
    closest[pi[first]] = q[first]
    dist[pi[first]] = d[first]
    tidx[pi[first]] = ti[first]
    return closest, dist, tidx


def closest_point_displacements(template: TriangleMesh, target: TriangleMesh, reject_dist: float):
    """Per-vertex displacement to the closest target point plus validity mask.

    Vertices farther than ``reject_dist`` are invalid and get zero displacement.
    """
    closest, dist, _ = closest_points_on_mesh(template.vertices, target)
    valid = dist <= reject_dist
    disp = np.where(valid[:, None], closest - template.vertices, 0.0)
    return disp, valid


def cotangent_laplacian(mesh: TriangleMesh) -> sp.csr_matrix:
    """Symmetric positive semi-definite cotangent Laplacian ``L = D - W``.

    Edge weights are ``(cot a + cot b) / 2`` clamped to >= 0.
    """
    n = mesh.point_count
    v, t = mesh.vertices, mesh.triangles
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = t[:, (k + 1) % 3], t[:, (k + 2) % 3], t[:, k]
        u1, u2 = v[i] - v[o], v[j] - v[o]
        cross = np.linalg.norm(np.cross(u1, u2), axis=1)
        dot = np.einsum("ij,ij->i", u1, u2)
        cot = np.where(cross > 1e-12, dot / np.maximum(cross, 1e-300), 0.0)
        rows += [i, j]
        cols += [j, i]
        vals += [0.5 * cot, 0.5 * cot]
    w = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    w.sum_duplicates()
    w.data = np.maximum(w.data, 0.0)
    w.eliminate_zeros()
    deg = np.asarray(w.sum(axis=1)).ravel()
    return (sp.diags(deg) - w).tocsr()


def lb_regularized_smooth(template: TriangleMesh, raw, mask, stiffness: float, laplacian=None) -> np.ndarray:
    """Solve ``(M + stiffness * L) d = M raw`` per coordinate, M = diag(mask)."""
    raw = np.asarray(raw, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if raw.shape != (template.point_count, 3) or mask.shape != (template.point_count,):
        raise ValidationError("displacement field / mask length must equal point count")
    if not stiffness > 0:
        raise ValidationError("stiffness must be positive")
    lap = cotangent_laplacian(template) if laplacian is None else laplacian
    adjacency = (lap - sp.diags(lap.diagonal())).tocsr()
    adjacency.eliminate_zeros()
    n_comp, labels = connected_components(adjacency, directed=False)
    anchored = np.bincount(labels, weights=mask.astype(float), minlength=n_comp)
    if np.any(anchored == 0):
        raise SingularSystem("a connected component has no valid correspondence")
    system = (sp.diags(mask.astype(float)) + stiffness * lap).tocsc()
    rhs = raw * mask[:, None]
    d = splu(system).solve(rhs)
    resid = np.linalg.norm(system @ d - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if not np.all(np.isfinite(d)) or (np.linalg.norm(rhs) > 0 and resid > 1e-8):
        raise SingularSystem(f"linear solve failed (relative residual {resid:.2e})")
    return d


def mean_surface_distance(mesh: TriangleMesh, target: TriangleMesh) -> float:
    return float(closest_points_on_mesh(mesh.vertices, target)[1].mean())


def _run_pass(current: TriangleMesh, target: TriangleMesh, stiffness: float, cfg: MorphConfig) -> TriangleMesh:
    for _ in range(cfg.iterations_per_pass):
        raw, valid = closest_point_displacements(current, target, cfg.correspondence_rejection_distance)
        d = lb_regularized_smooth(current, raw, valid, stiffness)
        current = current.with_vertices(current.vertices + d)
    return current


def establish_correspondence(
    template: TriangleMesh,
    target: TriangleMesh,
    template_lms: LandmarkSet,
    target_lms: LandmarkSet,
    cfg: MorphConfig = MorphConfig(),
    return_history: bool = False,
):
    """Morph ``template`` onto ``target``; the result keeps the template topology.

    Landmark similarity alignment, then a high-stiffness and a low-stiffness
    pass.  With ``return_history`` also returns the mean surface distance
    after each stage (``aligned``, ``pass1``, ``pass2``).
    """
    transform = similarity_procrustes(template_lms, target_lms)
    current = apply_transform(template, transform)
    history = {"aligned": mean_surface_distance(current, target)}
    current = _run_pass(current, target, cfg.stiffness_high, cfg)
    if cfg.rigid_between_passes:
        closest, dist, _ = closest_points_on_mesh(current.vertices, target)
        valid = dist <= cfg.correspondence_rejection_distance
        if valid.sum() >= 3:
            rigid = rigid_procrustes(current.vertices[valid], closest[valid])
            current = apply_transform(current, rigid)
    history["pass1"] = mean_surface_distance(current, target)
    current = _run_pass(current, target, cfg.stiffness_low, cfg)
    history["pass2"] = mean_surface_distance(current, target)
    if return_history:
        return current, history
    return current


class TemplateMorpher(BaseEstimator):
    """Estimator wrapper: ``fit`` stores the template, ``transform`` morphs targets.

    ``transform`` takes a sequence of ``(mesh, landmarks)`` pairs and returns
    the corresponded meshes (template topology).
    """

    def __init__(self, stiffness_high=100.0, stiffness_low=1.0, iterations_per_pass=10,
                 correspondence_rejection_distance=10.0, rigid_between_passes=True):
        self.stiffness_high = stiffness_high
        self.stiffness_low = stiffness_low
        self.iterations_per_pass = iterations_per_pass
        self.correspondence_rejection_distance = correspondence_rejection_distance
        self.rigid_between_passes = rigid_between_passes

    @property
    def config(self) -> MorphConfig:
        return MorphConfig(self.stiffness_high, self.stiffness_low, self.iterations_per_pass,
                           self.correspondence_rejection_distance, self.rigid_between_passes)

    def fit(self, template: TriangleMesh, landmarks: LandmarkSet):
        self.config  # validates
        self.template_ = template
        self.template_landmarks_ = landmarks
        return self

    def transform(self, targets):
        cfg = self.config
        out, hist = [], []
        for mesh, lms in targets:
            m, h = establish_correspondence(self.template_, mesh, self.template_landmarks_, lms, cfg, True)
            out.append(m)
            hist.append(h)
        self.history_ = hist
        return out
