"""Non-rigid point cloud registration toolkit."""
from .geometry import (
    CorrespondenceSet,
    DeformationField,
    PointCloud,
    RigidTransform,
    apply_deformation,
    apply_rigid,
    chamfer_distance,
    knn_indices,
    mean_distance,
)
from .synth import ChallengeSpec, RegistrationPair, make_pair, sample_primitive
from .solver import SolverConfig
from .descriptor import Descriptor, DescriptorConfig

__version__ = "0.1.0"

__all__ = [
    "ChallengeSpec",
    "CorrespondenceSet",
    "DeformationField",
    "Descriptor",
    "DescriptorConfig",
    "PointCloud",
    "RegistrationPair",
    "RigidTransform",
    "SolverConfig",
    "apply_deformation",
    "apply_rigid",
    "chamfer_distance",
    "knn_indices",
    "make_pair",
    "mean_distance",
    "sample_primitive",
]
