from carmpose.metrics.pose_metrics import add, add_s, angular_error, evaluate_pose, reprojection_error_2d
from carmpose.metrics.report import aggregate

__all__ = ["add", "add_s", "angular_error", "evaluate_pose", "reprojection_error_2d", "aggregate"]
