"""Few-shot visual localization by hierarchical scene-region classification."""

from .geometry import (
    PinholeCamera,
    PointCloud,
    Se3Pose,
    backproject,
    fuse_point_cloud,
    pose_error,
    project,
)
from .partition import PartitionTree, RegionLabel, build_tree, cluster_leaves, kmeans, label_point, label_view
from .pose import CorrespondenceSet, RansacConfig, ScoredPose, consensus_score, p3p_solve, ransac, refine, solve_minimal

__version__ = "0.1.0"
