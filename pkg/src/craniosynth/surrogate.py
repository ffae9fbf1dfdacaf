"""Parametric surrogate heads standing in for the clinical scans.

Each head is a subdivided icosphere scaled to an ellipsoid (x lateral
towards the patient's right, y forward, z up) and deformed by four smooth
phenotype parameters:

* ``elongation``: stretch front-back, narrow sideways (sagittal phenotype)
* ``frontal_narrowing``: triangular forehead with a midline keel (metopic)
* ``posterior_flattening``: short, wide, tall head (coronal / brachycephaly)
* ``asymmetry``: one-sided frontal flattening, side drawn at random (coronal)

Landmarks are fixed icosphere vertices, so they lie on every generated
surface and share vertex ids with the template.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import CLASS_NAMES, N_CLASSES
from .distance_map import DEFAULT_SCALE_MM, head_frame_from_landmarks, mesh_to_distance_map, save_maps, write_pgm
from .exceptions import BadClass, ValidationError
from .geometry import DEFAULT_SCHEMA, LandmarkSet, SimilarityTransform, TriangleMesh, write_obj

REFERENCE_CLASS_FRACTIONS = (0.56, 0.05, 0.14, 0.25)
REFERENCE_TOTAL = 496

# unit directions on the base sphere (x right, y forward, z up)
LANDMARK_DIRECTIONS = {
    "nasion": (0.0, 1.0, -0.15),
    "glabella": (0.0, 1.0, 0.05),
    "pronasale": (0.0, 1.0, -0.35),
    "subnasale": (0.0, 0.9, -0.55),
    "tragion_left": (-1.0, -0.1, -0.15),
    "tragion_right": (1.0, -0.1, -0.15),
    "exocanthion_left": (-0.45, 0.85, -0.2),
    "exocanthion_right": (0.45, 0.85, -0.2),
    "cheilion_left": (-0.3, 0.85, -0.7),
    "cheilion_right": (0.3, 0.85, -0.7),
}

PHENOTYPE_KEYS = ("elongation", "frontal_narrowing", "posterior_flattening", "asymmetry")


def icosphere(level: int = 3):
    """Unit icosphere ``(vertices, triangles)`` with outward-facing triangles."""
    p = (1 + 5**0.5) / 2
    verts = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
             (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(x, dtype=float) / np.linalg.norm(x) for x in verts]
    f = faces
    for _ in range(level):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = new
    return np.array(v), np.array(f, dtype=np.int64)


@dataclass(frozen=True)
class ClassPhenotype:
    mean: tuple
    std: tuple


def _default_phenotypes():
    # order: elongation, frontal_narrowing, posterior_flattening, asymmetry
    return (
        ClassPhenotype((0.0, 0.0, 0.0, 0.0), (0.03, 0.02, 0.03, 0.03)),      # control
        ClassPhenotype((-0.04, 0.0, 0.20, 0.10), (0.03, 0.02, 0.04, 0.03)),  # coronal
        ClassPhenotype((0.0, 0.50, 0.0, 0.0), (0.03, 0.05, 0.03, 0.02)),     # metopic
        ClassPhenotype((0.25, 0.0, 0.0, 0.0), (0.05, 0.02, 0.03, 0.02)),     # sagittal
    )


@dataclass(frozen=True)
class SurrogateParams:
    radii: tuple = (64.0, 82.0, 74.0)
    size_std: float = 0.02
    pose_rotation_std_deg: float = 3.0
    pose_translation_std: float = 5.0
    subdivision: int = 3
    phenotypes: tuple = field(default_factory=_default_phenotypes)

    def __post_init__(self):
        if len(self.radii) != 3 or not all(r > 0 for r in self.radii):
            raise ValidationError("radii must be three positive values")
        stds = [self.size_std, self.pose_rotation_std_deg, self.pose_translation_std]
        stds += [s for ph in self.phenotypes for s in ph.std]
        if any(s < 0 for s in stds):
            raise ValidationError("standard deviations must be >= 0")
        if len(self.phenotypes) != N_CLASSES:
            raise ValidationError("need one phenotype per class")

    def with_zero_variation(self) -> "SurrogateParams":
        return SurrogateParams(self.radii, 0.0, 0.0, 0.0, self.subdivision,
                               tuple(ClassPhenotype(p.mean, (0.0,) * 4) for p in self.phenotypes))


_SPHERE_CACHE: dict = {}


def _sphere(level):
    if level not in _SPHERE_CACHE:
        _SPHERE_CACHE[level] = icosphere(level)
    return _SPHERE_CACHE[level]


def landmark_vertex_ids(level: int = 3) -> dict:
    verts, _ = _sphere(level)
    out = {}
    for name in DEFAULT_SCHEMA.names:
        d = np.asarray(LANDMARK_DIRECTIONS[name], dtype=float)
        out[name] = int(np.argmax(verts @ (d / np.linalg.norm(d))))
    if len(set(out.values())) != len(out):
        raise ValidationError("landmark directions collapse onto the same vertex")
    return out


def deform(unit: np.ndarray, radii, elongation=0.0, frontal_narrowing=0.0,
           posterior_flattening=0.0, asymmetry=0.0, side=1.0) -> np.ndarray:
    """Map unit-sphere points to a deformed head surface (mm)."""
    ux, uy, uz = unit[:, 0], unit[:, 1], unit[:, 2]
    x, y, z = radii[0] * ux, radii[1] * uy, radii[2] * uz
    y = y * (1 + elongation)
    x = x * (1 - 0.5 * elongation)
    front = np.clip(uy, 0, None) ** 2
    x = x * (1 - frontal_narrowing * front)
    y = y + frontal_narrowing * 0.25 * radii[1] * front * np.exp(-(ux / 0.35) ** 2)
    y = y * (1 - 0.6 * posterior_flattening)
    x = x * (1 + 0.4 * posterior_flattening)
    z = z * (1 + 0.3 * posterior_flattening)
    y = y - asymmetry * radii[1] * front * np.clip(side * ux, 0, None) ** 2
    return np.stack([x, y, z], axis=1)


def template_head(params: SurrogateParams = SurrogateParams()):
    """Undeformed base ellipsoid with landmarks: the morphing template."""
    unit, tri = _sphere(params.subdivision)
    mesh = TriangleMesh(deform(unit, params.radii), tri)
    ids = landmark_vertex_ids(params.subdivision)
    return mesh, LandmarkSet({n: mesh.vertices[i] for n, i in ids.items()})


def _random_rotation(rng, std_deg):
    angles = np.deg2rad(rng.normal(0.0, std_deg, size=3)) if std_deg > 0 else np.zeros(3)
    cx, cy, cz = np.cos(angles)
    sx, sy, sz = np.sin(angles)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def generate_head(class_id: int, params: SurrogateParams = SurrogateParams(), rng=None):
    """One labelled head: ``(mesh, landmarks)``, deterministic in the rng state."""
    if class_id not in range(N_CLASSES):
        raise BadClass(f"class id must be in 0..{N_CLASSES - 1}, got {class_id}")
    rng = np.random.default_rng(rng)
    ph = params.phenotypes[class_id]
    values = rng.normal(ph.mean, ph.std) if any(ph.std) else np.asarray(ph.mean, dtype=float)
    side = 1.0 if rng.random() < 0.5 else -1.0
    size = 1.0 + (rng.normal(0.0, params.size_std) if params.size_std > 0 else 0.0)
    rot = _random_rotation(rng, params.pose_rotation_std_deg)
    shift = rng.normal(0.0, params.pose_translation_std, size=3) if params.pose_translation_std > 0 else np.zeros(3)
    unit, tri = _sphere(params.subdivision)
    pts = deform(unit, params.radii, *values, side=side) * size
    pose = SimilarityTransform(rot, 1.0, shift)
    mesh = TriangleMesh(pose.apply(pts), tri)
    ids = landmark_vertex_ids(params.subdivision)
    return mesh, LandmarkSet({n: mesh.vertices[i] for n, i in ids.items()})


def reference_class_counts(total: int = REFERENCE_TOTAL, fractions=REFERENCE_CLASS_FRACTIONS) -> tuple:
    """Largest-remainder rounding of ``total * fractions``."""
    raw = np.asarray(fractions, dtype=float) * total
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return tuple(int(c) for c in counts)


@dataclass
class Sample:
    id: str
    label: int
    mesh: TriangleMesh
    landmarks: LandmarkSet
    distance_map: np.ndarray


def generate_dataset(counts=None, params: SurrogateParams = SurrogateParams(), seed: int = 0,
                     scale_mm: float = DEFAULT_SCALE_MM) -> list:
    """Labelled corpus; sample ``k`` is drawn from ``default_rng([seed, k])``.

    Class order is shuffled with ``default_rng(seed)`` so ids do not reveal labels.
    """
    counts = reference_class_counts() if counts is None else tuple(int(c) for c in counts)
    if len(counts) != N_CLASSES or any(c < 0 for c in counts):
        raise ValidationError("counts must be four non-negative integers")
    labels = np.repeat(np.arange(N_CLASSES), counts)
    labels = labels[np.random.default_rng(seed).permutation(len(labels))]
    width = max(4, len(str(len(labels))))
    samples = []
    for k, lab in enumerate(labels):
        mesh, lms = generate_head(int(lab), params, np.random.default_rng([seed, k]))
        dmap = mesh_to_distance_map(mesh, head_frame_from_landmarks(lms), scale_mm)
        samples.append(Sample(f"S{k:0{width}d}", int(lab), mesh, lms, dmap))
    return samples


def write_corpus(samples, out_dir, params: SurrogateParams = SurrogateParams()) -> Path:
    """OBJ + landmark JSON + PGM/float maps per sample, ``manifest.csv`` and the template."""
    out = Path(out_dir)
    for sub in ("meshes", "landmarks", "maps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_obj(s.mesh, out / "meshes" / f"{s.id}.obj")
        s.landmarks.to_json(out / "landmarks" / f"{s.id}.json")
        write_pgm(s.distance_map, out / "maps" / f"{s.id}.pgm")
        save_maps(out / "maps" / f"{s.id}.dmap", s.distance_map[None], [s.label], [s.id])
    template, tlms = template_head(params)
    write_obj(template, out / "template.obj")
    tlms.to_json(out / "template_landmarks.json")
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class", "split"])
        for s in samples:
            w.writerow([s.id, s.label, ""])
    return out / "manifest.csv"


def class_name(label: int) -> str:
    return CLASS_NAMES[label]
