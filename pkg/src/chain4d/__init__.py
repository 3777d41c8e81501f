"""chain4d: attention-chain correspondences, topology-preserving mesh
animation, 2D/4D point tracking, robust camera recovery and stabilized
long rollouts, all driven by row-stochastic attention maps read from a
file archive and all verifiable against synthetic ground truth."""

__version__ = "0.1.0"

from .geom import (
    LatentTokenMeta,
    RowStochasticMap,
    SurfaceSampleSet,
    TriMesh,
    softmax_rows,
    weighted_centroid,
)

__all__ = [
    "LatentTokenMeta",
    "RowStochasticMap",
    "SurfaceSampleSet",
    "TriMesh",
    "softmax_rows",
    "weighted_centroid",
    "__version__",
]
