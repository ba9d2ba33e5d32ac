from .layout import (ESSENTIAL_GROUPS, REDUNDANT_GROUPS, FeatureLayout, LayoutError, MotionSequence,
                     concat_features, extract_essential)
from .norm import NormStats, compute_norm_stats, denormalize, normalize, restrict
from .kinematics import derive_root_velocities, integrate_root, recover_joints, yaw_matrix
from .perturb import perturb
from .synth import CLASSES, SynthConfig, SynthSample, synth_dataset, synth_sample, vocabulary_words

__all__ = [name for name in dir() if not name.startswith("_")]
