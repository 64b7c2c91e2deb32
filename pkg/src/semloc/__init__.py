"""Grid-based Bayesian localization against a compact semantic map.

The map holds lane boundaries as polylines and signs as a sparse raster.  The
filter keeps a discrete belief over a lateral x longitudinal x heading grid
around the dead-reckoned pose and fuses odometry, GPS, lane and sign
observations; the pose estimate is a soft-argmax over that belief.
"""
from .pose import Point2, Pose2, compose, inverse_compose, transform_point, wrap_angle

__all__ = ["Point2", "Pose2", "compose", "inverse_compose", "transform_point", "wrap_angle"]
__version__ = "0.1.0"
