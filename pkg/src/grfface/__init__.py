"""Gaussian receptive-field feature learning and pairwise face verification.

The package builds a hierarchical face representation (derivative filter
channels, activated patches, pooled descriptors, per-patch discriminant
projections), trains a pairwise linear classifier with consensus block
splitting, and evaluates verification performance.
"""

from .admm import (
    AdmmConfig,
    consensus_round,
    newton_solve,
    partition_blocks,
    solve_local,
    train_consensus,
    train_distributed,
)
from .evalharness import (
    RocCurve,
    SyntheticConfig,
    fuse_scores,
    generate_synthetic,
    kfold_protocol,
    roc,
    tpr_at_fpr,
)
from .grfbank import ChannelBank, ChannelSpec, build_kernel, compute_maps, enumerate_full_bank
from .imgcore import IntegralImage, Kernel2D, convolve, integral
from .lda import ProjectionModel, ScatterPair, accumulate_scatter, fit_projection, project
from .modelfile import ModelFile, load_model, save_model
from .pairengine import SvmModel, pair_rep, similarity, svm_objective
from .patchpool import PatchPool, PatchSpec, generate_pool
from .pipeline import DatasetManifest, PipelineConfig, estimate_cost, run_pipeline, verify_pair
from .pooling import channel_meta_feature, normalize_sift, pool_patch, t2_cell
from .sffs import CandidateSet, SelectionResult, objective_j, sffs_select

__version__ = "0.1.0"
