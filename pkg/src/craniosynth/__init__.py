"""Synthetic distance-map generators for head-shape classification.

Three generators (a per-class statistical shape model, per-class image PCA
and a conditional Wasserstein GAN) produce 28x28 distance maps that train a
small CNN; :mod:`craniosynth.pipeline` runs the train-on-synthetic /
test-on-real protocol on a built-in surrogate corpus.
"""
from .classifier import AugmentConfig, DistanceMapClassifier, Metrics, compute_metrics
from .distance_map import DistanceMapEncoder, HeadFrame, head_frame_from_landmarks, mesh_to_distance_map
from .exceptions import CraniosynthError, NumericalError, ValidationError
from .gan import ConditionalWGAN, GanConfig
from .geometry import LandmarkSet, SimilarityTransform, TriangleMesh, generalized_procrustes, similarity_procrustes
from .image_pca import ImagePCA
from .morphing import MorphConfig, TemplateMorpher, establish_correspondence
from .pipeline import Corpus, ExperimentConfig, GeneratorSet, run_experiment, stratified_split
from .ssim_eval import SsimParams, contrast_structure, ssim, ssim_cc
from .ssm import ShapeModel

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "ConditionalWGAN", "Corpus", "CraniosynthError", "DistanceMapClassifier",
    "DistanceMapEncoder", "ExperimentConfig", "GanConfig", "GeneratorSet", "HeadFrame", "ImagePCA",
    "LandmarkSet", "Metrics", "MorphConfig", "NumericalError", "ShapeModel", "SimilarityTransform",
    "SsimParams", "TemplateMorpher", "TriangleMesh", "ValidationError", "compute_metrics", "contrast_structure",
    "establish_correspondence", "generalized_procrustes", "head_frame_from_landmarks",
    "mesh_to_distance_map", "run_experiment", "similarity_procrustes", "ssim", "ssim_cc", "stratified_split",
]
