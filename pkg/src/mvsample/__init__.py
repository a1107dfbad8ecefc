"""Multivariate data reduction with local PCA models over spatial partitions."""
from .bundle import ReducedBundle, load_bundle, reduce, save_bundle, size_report
from .field import GridSpec, MultivariateField, ScalarField, SyntheticConfig, gen_synthetic, load_field, save_field
from .partition import KdCriterion, PartitionSet, SlicParams, partition_kdtree, partition_regular, partition_slic
from .sampling import SamplePlan

__version__ = "0.1.0"

__all__ = [
    "GridSpec", "MultivariateField", "ScalarField", "SyntheticConfig", "gen_synthetic",
    "load_field", "save_field", "KdCriterion", "PartitionSet", "SlicParams",
    "partition_kdtree", "partition_regular", "partition_slic", "SamplePlan",
    "ReducedBundle", "reduce", "save_bundle", "load_bundle", "size_report",
]
