"""Train-on-synthetic / test-on-real experiment runner.

The clinical corpus is split per class into a validation half and a test
half.  All generators and every classifier see the validation half only;
the test half is read once, for the final evaluation.  Reads go through an
:class:`AccessLog` so the separation can be audited exactly.
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._validation import MAP_SIZE, N_CLASSES, check_fraction, check_labels
from .classifier import AugmentConfig, DistanceMapClassifier, Metrics
from .distance_map import (DEFAULT_SCALE_MM, head_frame_from_landmarks, landmarks_from_vertices, load_maps,
                           mesh_to_distance_map, save_maps)
from .exceptions import (CraniosynthError, EmptyCorpus, InsufficientClassSamples, ValidationError)
from .gan import ConditionalWGAN, GanConfig
from .geometry import LandmarkSet, generalized_procrustes, read_obj
from .image_pca import ImagePCA
from .morphing import MorphConfig, TemplateMorpher, closest_points_on_mesh
from .ssm import ShapeModel

log = logging.getLogger(__name__)

SOURCES = ("gan", "pca", "ssm")
ROWS = ("GAN", "PCA", "SSM", "GAN-PCA", "GAN-SSM", "PCA-SSM", "GAN-PCA-SSM", "Clinical")
CLINICAL = "Clinical"
EVALUATION_PHASE = "evaluate"


def derive_seed(master: int, *names) -> int:
    """Stable 63-bit seed from a master seed and a path of names."""
    key = "/".join([str(int(master)), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def row_sources(row: str) -> tuple:
    if row == CLINICAL:
        return ()
    parts = tuple(p.lower() for p in row.split("-"))
    if not parts or any(p not in SOURCES for p in parts):
        raise ValidationError(f"unknown grid row {row!r}")
    return parts


# -- corpus and access recording ---------------------------------------------

class AccessLog:
    """Records ``(phase, kind, id)`` for every per-sample read."""

    def __init__(self):
        self.records = []
        self._phase = "unscoped"

    @contextlib.contextmanager
    def phase(self, name: str):
        prev, self._phase = self._phase, name
        try:
            yield self
        finally:
            self._phase = prev

    def record(self, kind: str, sample_id: str) -> None:
        self.records.append((self._phase, kind, sample_id))

    def ids(self, exclude_phases=()) -> set:
        return {i for p, _, i in self.records if p not in exclude_phases}

    def audit(self, test_ids) -> dict:
        """Test ids read outside the evaluation phase (must be empty) and read counts per phase."""
        test = set(test_ids)
        leaked = sorted(self.ids(exclude_phases=(EVALUATION_PHASE,)) & test)
        counts = {}
        for p, _, _ in self.records:
            counts[p] = counts.get(p, 0) + 1
        return {"test_ids_accessed_outside_evaluation": leaked, "reads_by_phase": dict(sorted(counts.items()))}


class Corpus:
    """Labelled samples on disk (``manifest.csv`` + meshes/landmarks/maps) or in memory."""

    def __init__(self, ids, labels, loader, template=None, access: AccessLog | None = None):
        self.ids = [str(i) for i in ids]
        self.labels = check_labels(labels, len(self.ids))
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("sample ids must be unique")
        self._label_of = dict(zip(self.ids, self.labels.tolist()))
        self._loader = loader
        self._template = template
        self.access = access if access is not None else AccessLog()

    @classmethod
    def from_directory(cls, root, access: AccessLog | None = None) -> "Corpus":
        root = Path(root)
        with open(root / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        loaders = {
            "mesh": lambda i: read_obj(root / "meshes" / f"{i}.obj"),
            "landmarks": lambda i: LandmarkSet.from_json(root / "landmarks" / f"{i}.json"),
            "map": lambda i: load_maps(root / "maps" / f"{i}.dmap")[0][0],
        }

        def template():
            return read_obj(root / "template.obj"), LandmarkSet.from_json(root / "template_landmarks.json")

        return cls([r["id"] for r in rows], [int(r["class"]) for r in rows], loaders, template, access)

    @classmethod
    def from_samples(cls, samples, template=None, access: AccessLog | None = None) -> "Corpus":
        by_id = {s.id: s for s in samples}
        loaders = {
            "mesh": lambda i: by_id[i].mesh,
            "landmarks": lambda i: by_id[i].landmarks,
            "map": lambda i: by_id[i].distance_map,
        }
        return cls([s.id for s in samples], [s.label for s in samples], loaders,
                   (lambda: template) if template is not None else None, access)

    def __len__(self):
        return len(self.ids)

    def label(self, sample_id: str) -> int:
        return self._label_of[sample_id]

    def _read(self, kind, sample_id):
        if sample_id not in self._label_of:
            raise ValidationError(f"unknown sample id {sample_id!r}")
        self.access.record(kind, sample_id)
        return self._loader[kind](sample_id)

    def mesh(self, sample_id):
        return self._read("mesh", sample_id)

    def landmarks(self, sample_id):
        return self._read("landmarks", sample_id)

    def distance_map(self, sample_id) -> np.ndarray:
        return self._read("map", sample_id)

    def maps(self, ids):
        ids = list(ids)
        m = np.stack([self.distance_map(i) for i in ids]) if ids else np.zeros((0, MAP_SIZE, MAP_SIZE))
        return m, np.array([self.label(i) for i in ids], dtype=np.int64)

    def template(self):
        if self._template is None:
            raise ValidationError("corpus has no morphing template")
        return self._template()


# -- split --------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    validation_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        f = check_fraction(self.validation_fraction, "validation_fraction")
        if f >= 1:
            raise ValidationError("validation_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Split:
    validation: tuple
    test: tuple
    spec: SplitSpec = SplitSpec()

    def to_json(self, path) -> None:
        data = {"spec": asdict(self.spec), "validation": list(self.validation), "test": list(self.test)}
        Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "Split":
        data = json.loads(Path(path).read_text())
        return cls(tuple(data["validation"]), tuple(data["test"]), SplitSpec(**data["spec"]))


def stratified_split(ids, labels, spec: SplitSpec = SplitSpec()) -> Split:
    """Per-class shuffle and cut.

    A class with an odd count gives its extra sample to validation unless
    validation is already ahead, so the two halves stay within one sample of
    each other overall as well as per class.
    """
    ids = [str(i) for i in ids]
    labels = check_labels(labels, len(ids))
    if not ids:
        raise EmptyCorpus("cannot split an empty corpus")
    rng = np.random.default_rng(spec.seed)
    ratio = spec.validation_fraction / (1 - spec.validation_fraction)
    val, test = [], []
    for k in range(N_CLASSES):
        members = sorted(i for i, lab in zip(ids, labels) if lab == k)
        members = [members[j] for j in rng.permutation(len(members))]
        exact = len(members) * spec.validation_fraction
        cut = int(np.floor(exact))
        tie = abs(exact - cut - 0.5) < 1e-9
        if exact > cut + 1e-9 and not (tie and len(val) > len(test) * ratio):
            cut += 1
        val += members[:cut]
        test += members[cut:]
    return Split(tuple(sorted(val)), tuple(sorted(test)), spec)


# -- configuration -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    n_per_class: int = 1000
    variance_fraction: float = 0.95
    validation_fraction: float = 0.5
    scale_mm: float = DEFAULT_SCALE_MM
    clinical_lr: float = 1e-3
    morph: dict = field(default_factory=lambda: asdict(MorphConfig()))
    gan: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValidationError("n_per_class must be >= 1")
        check_fraction(self.variance_fraction)
        MorphConfig.from_dict(self.morph)
        unknown = set(self.gan) - {f.name for f in fields(GanConfig)}
        if unknown:
            raise ValidationError(f"unknown GAN settings {sorted(unknown)}")
        unknown = set(self.classifier) - set(DistanceMapClassifier().get_params())
        if unknown:
            raise ValidationError(f"unknown classifier settings {sorted(unknown)}")

    def gan_config(self, seed: int) -> GanConfig:
        return GanConfig(**{**self.gan, "seed": seed})

    def classifier_params(self, seed: int, **overrides) -> dict:
        params = {**self.classifier, "seed": seed, **overrides}
        if isinstance(params.get("augment"), dict):
            params["augment"] = AugmentConfig(**params["augment"])
        return params

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown experiment settings {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- generators ----------------------------------------------------------------

@dataclass
class GeneratorSet:
    ssm: dict = field(default_factory=dict)
    pca: dict = field(default_factory=dict)
    gan: ConditionalWGAN | None = None
    provenance: dict = field(default_factory=dict)
    scale_mm: float = DEFAULT_SCALE_MM

    @property
    def sources(self) -> tuple:
        return tuple(s for s in SOURCES if (self.gan is not None if s == "gan" else bool(getattr(self, s))))

    def synthesize(self, source: str, n_per_class: int, seed: int):
        """``n_per_class`` maps for each class; returns ``(maps, labels)`` in class order."""
        maps, labels = [], []
        for k in range(N_CLASSES):
            s = derive_seed(seed, source, k)
            if source == "ssm":
                model = self.ssm[k]
                m = np.stack([ssm_mesh_to_map(mesh, model, self.scale_mm) for mesh in model.sample(n_per_class, s)])
            elif source == "pca":
                m = self.pca[k].sample(n_per_class, s)
            elif source == "gan":
                m = self.gan.sample(k, n_per_class, s)
            else:
                raise ValidationError(f"unknown source {source!r}")
            maps.append(m)
            labels.append(np.full(n_per_class, k, dtype=np.int64))
        return np.concatenate(maps), np.concatenate(labels)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, m in sorted(self.ssm.items()):
            m.save(out / f"ssm_{k}.bin")
        for k, m in sorted(self.pca.items()):
            m.save(out / f"pca_{k}.bin")
        if self.gan is not None:
            self.gan.save(out / "gan.bin")
            self.gan.write_log(out / "gan_log.csv")
        meta = {"provenance": self.provenance, "scale_mm": self.scale_mm}
        (out / "provenance.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, in_dir) -> "GeneratorSet":
        d = Path(in_dir)
        meta = json.loads((d / "provenance.json").read_text())
        ssm = {k: ShapeModel.load(d / f"ssm_{k}.bin") for k in range(N_CLASSES) if (d / f"ssm_{k}.bin").exists()}
        pca = {k: ImagePCA.load(d / f"pca_{k}.bin") for k in range(N_CLASSES) if (d / f"pca_{k}.bin").exists()}
        gan = ConditionalWGAN.load(d / "gan.bin") if (d / "gan.bin").exists() else None
        return cls(ssm, pca, gan, meta["provenance"], meta["scale_mm"])


def ssm_mesh_to_map(mesh, model: ShapeModel, scale_mm: float = DEFAULT_SCALE_MM) -> np.ndarray:
    """Distance map of a synthesized mesh, framed by landmarks read off fixed template vertices."""
    lms = landmarks_from_vertices(mesh, model.landmark_vertices_)
    return mesh_to_distance_map(mesh, head_frame_from_landmarks(lms), scale_mm)


def _barycentric(q, a, b, c):
    v0, v1, v2 = b - a, c - a, q - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.array([1 - v - w, v, w])


def consensus_landmark_anchors(corresponded, landmarks) -> dict:
    """Landmark anchors as vertex weights averaged over the class.

    Correspondence slides vertices tangentially, so the template's own
    landmark vertices drift.  Each true landmark is projected onto its
    corresponded mesh; the barycentric weights of the hits are averaged
    across samples into one ``[(vertex id, weight), ...]`` list per landmark.
    """
    out = {}
    for name in landmarks[0].names:
        acc = {}
        for mesh, lm in zip(corresponded, landmarks):
            q, _, t = closest_points_on_mesh(lm[name][None], mesh)
            ids = mesh.triangles[t[0]]
            bary = _barycentric(q[0], *mesh.vertices[ids])
            for i, w in zip(ids.tolist(), bary):
                acc[i] = acc.get(i, 0.0) + w / len(corresponded)
        out[name] = [[i, acc[i]] for i in sorted(acc)]
    return out


def template_landmark_vertices(template, landmarks: LandmarkSet) -> dict:
    """Nearest template vertex for each landmark."""
    out = {}
    for name in landmarks.names:
        d = np.linalg.norm(template.vertices - landmarks[name], axis=1)
        out[name] = int(np.argmin(d))
    return out


def build_generators(corpus: Corpus, validation_ids, cfg: ExperimentConfig = None, seed: int = 0,
                     sources=SOURCES) -> GeneratorSet:
    """Per-class SSMs and image PCAs plus one conditional GAN, all from validation samples."""
    cfg = cfg or ExperimentConfig()
    sources = tuple(sources)
    val = sorted(validation_ids)
    by_class = {k: [i for i in val if corpus.label(i) == k] for k in range(N_CLASSES)}
    if any(s in sources for s in ("ssm", "pca")):
        short = [k for k, ids in by_class.items() if len(ids) < 2]
        if short:
            raise InsufficientClassSamples(f"classes {short} have fewer than 2 validation samples")
    gens = GeneratorSet(scale_mm=cfg.scale_mm)
    prov = {"seed": seed, "config": cfg.to_dict(), "sources": {}}
    if "ssm" in sources:
        template, tlms = corpus.template()
        morpher = TemplateMorpher(**asdict(MorphConfig.from_dict(cfg.morph))).fit(template, tlms)
        prov["sources"]["ssm"] = {}
        for k, ids in by_class.items():
            log.info("morphing %d class-%d meshes", len(ids), k)
            targets = [(corpus.mesh(i), corpus.landmarks(i)) for i in ids]
            corresponded = morpher.transform(targets)
            lm_vertices = consensus_landmark_anchors(corresponded, [lm for _, lm in targets])
            aligned = generalized_procrustes(corresponded)
            gens.ssm[k] = ShapeModel(cfg.variance_fraction, class_label=k).fit(
                aligned.aligned, landmark_vertices=lm_vertices)
            prov["sources"]["ssm"][str(k)] = ids
    if "pca" in sources:
        prov["sources"]["pca"] = {}
        for k, ids in by_class.items():
            maps, _ = corpus.maps(ids)
            gens.pca[k] = ImagePCA(cfg.variance_fraction, class_label=k).fit(maps)
            prov["sources"]["pca"][str(k)] = ids
    if "gan" in sources:
        maps, labels = corpus.maps(val)
        log.info("training GAN on %d maps", len(val))
        gens.gan = ConditionalWGAN.from_config(cfg.gan_config(derive_seed(seed, "gan"))).fit(maps, labels)
        prov["sources"]["gan"] = val
    gens.provenance = prov
    return gens


# -- grid -----------------------------------------------------------------------

@dataclass
class ReportRow:
    name: str
    n_train: int
    metrics: Metrics | None = None
    best_epoch: int | None = None
    error: str | None = None

    @property
    def accuracy(self):
        return None if self.metrics is None else self.metrics.accuracy

    @property
    def macro_f1(self):
        return None if self.metrics is None else self.metrics.macro_f1


@dataclass
class ExperimentReport:
    rows: list
    audit: dict = field(default_factory=dict)

    def row(self, name: str) -> ReportRow:
        return next(r for r in self.rows if r.name == name)

    def best_multi_source(self) -> ReportRow:
        multi = [r for r in self.rows if len(row_sources(r.name)) > 1 and r.metrics is not None]
        return max(multi, key=lambda r: r.accuracy)

    def write(self, out_dir) -> Path:
        """``report.csv`` plus one ``confusion_<row>.csv`` per row; returns the report path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "n_train", "accuracy", "macro_f1"])
            for r in self.rows:
                w.writerow([r.name, r.n_train, "" if r.metrics is None else repr(r.accuracy),
                            "" if r.metrics is None else repr(r.macro_f1)])
        for r in self.rows:
            if r.metrics is None:
                continue
            with open(out / f"confusion_{r.name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["true\\pred", *range(N_CLASSES)])
                for k, counts in enumerate(r.metrics.confusion.tolist()):
                    w.writerow([k, *counts])
        summary = {
            "audit": self.audit,
            "rows": [{"row": r.name, "n_train": r.n_train, "best_epoch": r.best_epoch, "error": r.error,
                      "metrics": None if r.metrics is None else r.metrics.to_dict()} for r in self.rows],
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        return out / "report.csv"


def run_grid(generators: GeneratorSet, corpus: Corpus, split: Split, cfg: ExperimentConfig = None,
             seed: int = 0, rows=ROWS) -> ExperimentReport:
    """Train one classifier per row on synthetic (or validation) data, evaluate each once on the test half."""
    cfg = cfg or ExperimentConfig()
    with corpus.access.phase("train"):
        val_maps, val_labels = corpus.maps(split.validation)
        synthetic = {}
        for src in sorted({s for r in rows for s in row_sources(r)}):
            synthetic[src] = generators.synthesize(src, cfg.n_per_class, derive_seed(seed, "synth"))
        models = {}
        for name in rows:
            srcs = row_sources(name)
            try:
                if srcs:
                    X = np.concatenate([synthetic[s][0] for s in srcs])
                    y = np.concatenate([synthetic[s][1] for s in srcs])
                    params = cfg.classifier_params(derive_seed(seed, "row", name))
                else:
                    X, y = val_maps, val_labels
                    params = cfg.classifier_params(derive_seed(seed, "row", name), lr=cfg.clinical_lr)
                log.info("training row %s on %d maps", name, len(X))
                models[name] = (len(X), DistanceMapClassifier(**params).fit(X, y, val_maps, val_labels), None)
            except CraniosynthError as exc:
                log.warning("row %s failed: %s", name, exc)
                models[name] = (0, None, f"{type(exc).__name__}: {exc}")
    report_rows = []
    with corpus.access.phase(EVALUATION_PHASE):
        test_maps, test_labels = corpus.maps(split.test)
        for name in rows:
            n, model, err = models[name]
            if model is None:
                report_rows.append(ReportRow(name, n, error=err))
            else:
                report_rows.append(ReportRow(name, n, model.evaluate(test_maps, test_labels), model.best_epoch_))
    return ExperimentReport(report_rows, corpus.access.audit(split.test))


def run_experiment(corpus: Corpus, cfg: ExperimentConfig = None, seed: int = 0, rows=ROWS, out_dir=None):
    """Split, fit generators on the validation half, run the grid; returns ``(report, split, generators)``."""
    cfg = cfg or ExperimentConfig()
    split = stratified_split(corpus.ids, corpus.labels, SplitSpec(cfg.validation_fraction, derive_seed(seed, "split")))
    needed = tuple(s for s in SOURCES if any(s in row_sources(r) for r in rows))
    with corpus.access.phase("fit-generators"):
        gens = build_generators(corpus, split.validation, cfg, seed, needed)
    report = run_grid(gens, corpus, split, cfg, seed, rows)
    if out_dir is not None:
        out = Path(out_dir)
        report.write(out)
        split.to_json(out / "split.json")
        gens.save(out / "generators")
    return report, split, gens
