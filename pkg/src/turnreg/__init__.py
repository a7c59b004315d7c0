"""Pose alignment of turntable scans from image features lifted to 3D."""
__version__ = "0.1.0"

from .geom import (PinholeCamera, PointCloud, RigidTransform, apply, compose, invert, load_camera,
                   load_transform, rotation_angle_error, save_camera, save_transform, translation_error)
from .icp import IcpConfig, IcpResult, icp_refine
from .image import Image, gaussian_blur, load_pgm, save_pgm
from .ply import read_ply, write_ply
from .register import (NoOverlapError, DegenerateGeometryError, RansacResult, ScanSequence, kabsch,
                       overlap_matrix, ransac_rigid)
from .spatial import KDTree
from .pipeline import RunConfig, RunReport, align_sequence, align_two_poses, merge

__all__ = [
    "DegenerateGeometryError", "IcpConfig", "IcpResult", "Image", "KDTree", "NoOverlapError",
    "PinholeCamera", "PointCloud", "RansacResult", "RigidTransform", "RunConfig", "RunReport",
    "ScanSequence", "align_sequence", "align_two_poses", "apply", "compose", "gaussian_blur",
    "icp_refine", "invert", "kabsch", "load_camera", "load_pgm", "load_transform", "merge",
    "overlap_matrix", "ransac_rigid", "read_ply", "rotation_angle_error", "save_camera", "save_pgm",
    "save_transform", "translation_error", "write_ply",
]
