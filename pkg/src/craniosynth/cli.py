"""Command-line entry point: ``craniosynth <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import pipeline
from .classifier import AugmentConfig, DistanceMapClassifier
from .distance_map import load_maps, save_maps, write_pgm
from .exceptions import NumericalError, ValidationError
from .gan import ConditionalWGAN, GanConfig
from .geometry import LandmarkSet, read_obj, write_obj
from .morphing import MorphConfig, establish_correspondence
from .ssim_eval import AGGREGATES, ssim_cc_summary, write_summary_csv
from .surrogate import SurrogateParams, generate_dataset, reference_class_counts, write_corpus

log = logging.getLogger("craniosynth")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _write_json(path, data) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _csv_ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc


def _dmap_files(path) -> list:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise ValidationError(f"no such file or directory: {p}")
    files = sorted(p.rglob("*.dmap"))
    if not files:
        raise ValidationError(f"no .dmap files under {p}")
    return files


def load_labelled_maps(*paths):
    """Concatenate every ``.dmap`` file under ``paths``; all must carry labels."""
    maps, labels = [], []
    for path in paths:
        for f in _dmap_files(path):
            m, y, _ = load_maps(f)
            if y is None:
                raise ValidationError(f"{f} carries no labels")
            maps.append(m)
            labels.append(y)
    return np.concatenate(maps), np.concatenate(labels)


def _landmarks_beside(obj_path, explicit):
    if explicit:
        return LandmarkSet.from_json(explicit)
    p = Path(obj_path)
    for cand in (p.with_suffix(".json"), p.parent.parent / "landmarks" / f"{p.stem}.json",
                 p.parent / f"{p.stem}_landmarks.json"):
        if cand.exists():
            return LandmarkSet.from_json(cand)
    raise ValidationError(f"no landmark file found for {p}; pass it explicitly")


# -- commands -------------------------------------------------------------------

def cmd_surrogate_gen(args):
    counts = _csv_ints(args.counts) if args.counts else reference_class_counts()
    params = SurrogateParams()
    samples = generate_dataset(counts, params, args.seed, args.scale_mm)
    manifest = write_corpus(samples, args.out, params)
    log.info("wrote %d samples to %s", len(samples), manifest.parent)


def cmd_split(args):
    corpus = pipeline.Corpus.from_directory(args.corpus)
    split = pipeline.stratified_split(corpus.ids, corpus.labels,
                                      pipeline.SplitSpec(args.validation_fraction, args.seed))
    split.to_json(args.out)
    if args.export_dir:
        for name, ids in (("validation", split.validation), ("test", split.test)):
            maps, labels = corpus.maps(ids)
            out = Path(args.export_dir) / name
            out.mkdir(parents=True, exist_ok=True)
            save_maps(out / "maps.dmap", maps, labels, ids, {"subset": name})
    log.info("validation %d / test %d", len(split.validation), len(split.test))


def cmd_fit_generators(args):
    cfg = pipeline.ExperimentConfig.from_dict(_read_json(args.config))
    corpus = pipeline.Corpus.from_directory(args.corpus)
    split = pipeline.Split.from_json(args.split)
    with corpus.access.phase("fit-generators"):
        gens = pipeline.build_generators(corpus, split.validation, cfg, args.seed, args.sources.split(","))
    gens.save(args.out)
    audit = corpus.access.audit(split.test)
    _write_json(Path(args.out) / "audit.json", audit)
    if audit["test_ids_accessed_outside_evaluation"]:
        raise ValidationError("test samples were read while fitting generators")


def cmd_synth(args):
    gens = pipeline.GeneratorSet.load(args.generators)
    for source in args.sources.split(","):
        if source not in gens.sources:
            raise ValidationError(f"generator {source!r} not available in {args.generators}")
        maps, labels = gens.synthesize(source, args.n, pipeline.derive_seed(args.seed, "synth"))
        out = Path(args.out) / source
        out.mkdir(parents=True, exist_ok=True)
        ids = [f"{source}-{k}-{i:05d}" for k in range(4) for i in range(args.n)]
        save_maps(out / "maps.dmap", maps, labels, ids, {"source": source, "seed": args.seed})
        log.info("%s: %d maps", source, len(maps))


def _classifier_from_config(path, seed):
    params = _read_json(path)
    if isinstance(params.get("augment"), dict):
        params["augment"] = AugmentConfig(**params["augment"])
    unknown = set(params) - set(DistanceMapClassifier().get_params())
    if unknown:
        raise ValidationError(f"unknown classifier settings {sorted(unknown)}")
    params["seed"] = seed
    return DistanceMapClassifier(**params)


def cmd_train(args):
    X, y = load_labelled_maps(*args.train_dirs)
    Xv, yv = load_labelled_maps(args.val_dir)
    model = _classifier_from_config(args.config, args.seed).fit(X, y, Xv, yv)
    model.save(args.out)
    model.write_log(args.log or Path(args.out).with_suffix(".log.csv"))
    log.info("best epoch %d, validation F1 %.4f", model.best_epoch_, model.best_val_f1_)


def cmd_evaluate(args):
    model = DistanceMapClassifier.load(args.model)
    X, y = load_labelled_maps(args.data)
    metrics = model.evaluate(X, y)
    _write_json(args.out, metrics.to_dict())
    print(f"accuracy {metrics.accuracy:.4f} macro_f1 {metrics.macro_f1:.4f}")


def cmd_run_grid(args):
    cfg = pipeline.ExperimentConfig.from_dict(_read_json(args.config))
    corpus = pipeline.Corpus.from_directory(args.corpus)
    rows = tuple(args.rows.split(",")) if args.rows else pipeline.ROWS
    report, _, _ = pipeline.run_experiment(corpus, cfg, args.seed, rows, args.out)
    for r in report.rows:
        if r.metrics is None:
            print(f"{r.name:12s} n={r.n_train:6d} failed: {r.error}")
        else:
            print(f"{r.name:12s} n={r.n_train:6d} accuracy {r.accuracy:.4f} macro_f1 {r.macro_f1:.4f}")
    if report.audit["test_ids_accessed_outside_evaluation"]:
        raise ValidationError("leakage audit failed")


def cmd_ssim_eval(args):
    ref, ref_labels = load_labelled_maps(args.reference)
    root = Path(args.synthetic)
    summaries = []
    for f in _dmap_files(root):
        rel = f.relative_to(root) if root.is_dir() else Path(f.name)
        name = rel.parent.as_posix() if rel.name == "maps.dmap" and rel.parent.as_posix() != "." else \
            rel.with_suffix("").as_posix()
        syn, syn_labels = load_labelled_maps(f)
        summaries += ssim_cc_summary(syn, syn_labels, ref, ref_labels, generator=name, aggregate=args.aggregate)
    write_summary_csv(args.out, summaries)


def cmd_morph(args):
    cfg = MorphConfig.from_json(args.config) if args.config else MorphConfig()
    template, target = read_obj(args.template), read_obj(args.target)
    tl = _landmarks_beside(args.template, args.template_landmarks)
    gl = _landmarks_beside(args.target, args.target_landmarks)
    write_obj(establish_correspondence(template, target, tl, gl, cfg), args.out)


def cmd_gan_train(args):
    settings = _read_json(args.config)
    settings["seed"] = args.seed
    cfg = GanConfig(**settings)
    X, y = load_labelled_maps(args.data)
    model = ConditionalWGAN.from_config(cfg).fit(X, y)
    model.save(args.out)
    model.write_log(args.log or Path(args.out).with_suffix(".log.csv"))


def cmd_gan_sample(args):
    model = ConditionalWGAN.load(args.model)
    maps = model.sample(args.class_id, args.n, args.seed)
    ids = [f"gan-{args.class_id}-{i:05d}" for i in range(args.n)]
    save_maps(args.out, maps, np.full(args.n, args.class_id), ids, {"source": "gan", "seed": args.seed})
    if args.pgm_dir:
        Path(args.pgm_dir).mkdir(parents=True, exist_ok=True)
        for i, m in zip(ids, maps):
            write_pgm(m, Path(args.pgm_dir) / f"{i}.pgm")


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="craniosynth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("surrogate-gen", cmd_surrogate_gen, "generate a labelled surrogate head corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--counts", help="per-class counts, e.g. 278,25,69,124")
    sp.add_argument("--scale-mm", type=float, default=300.0)

    sp = add("split", cmd_split, "stratified validation/test split of a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="split JSON")
    sp.add_argument("--validation-fraction", type=float, default=0.5)
    sp.add_argument("--export-dir", help="also write validation/ and test/ map files here")

    sp = add("fit-generators", cmd_fit_generators, "fit SSMs, image PCAs and the GAN on the validation half")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--sources", default="ssm,pca,gan")

    sp = add("synth", cmd_synth, "sample synthetic distance maps from fitted generators")
    sp.add_argument("--generators", required=True)
    sp.add_argument("--sources", default="ssm,pca,gan")
    sp.add_argument("--n", type=int, default=1000, help="samples per class")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the distance-map classifier")
    sp.add_argument("--train-dirs", nargs="+", required=True)
    sp.add_argument("--val-dir", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")

    sp = add("evaluate", cmd_evaluate, "evaluate a trained classifier")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="metrics JSON")

    sp = add("run-grid", cmd_run_grid, "full experiment: split, generators, 7 combinations plus clinical row")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--rows", help="comma-separated subset of " + ",".join(pipeline.ROWS))

    sp = add("ssim-eval", cmd_ssim_eval, "SSIM_cc summaries of synthetic maps against references")
    sp.add_argument("--synthetic", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--aggregate", choices=AGGREGATES, default="min")

    sp = add("morph", cmd_morph, "morph a template mesh onto a target")
    sp.add_argument("--template", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--template-landmarks")
    sp.add_argument("--target-landmarks")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("gan-train", cmd_gan_train, "train the conditional GAN on labelled maps")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")

    sp = add("gan-sample", cmd_gan_sample, "sample maps of one class from a trained GAN")
    sp.add_argument("--model", required=True)
    sp.add_argument("--class", dest="class_id", type=int, required=True)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pgm-dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
