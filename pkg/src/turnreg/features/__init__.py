from .featio import FeatureSet, FeatureFileError, load_features, save_features
from .lift import LIFT_RADIUS, lift_to_3d
from .match import RATIO, Matches, match, ratio_test
from .sift import detect


def extract(image, cloud, cam, max_features=1000, radius=LIFT_RADIUS, pose_id=0, view_index=0):
    """Detect, describe and lift the features of one view."""
    kp, desc = detect(image, max_features=max_features)
    anchors, valid = lift_to_3d(kp, cloud, cam, radius)
    return FeatureSet(kp, desc, anchors, valid, pose_id, view_index)


__all__ = [
    "FeatureSet", "FeatureFileError", "Matches", "LIFT_RADIUS", "RATIO",
    "detect", "extract", "lift_to_3d", "load_features", "match", "ratio_test", "save_features",
]
