from carmpose.solver.pnp import CorrespondenceSet, estimate_board_pose, refine_gauss_newton, solve_epnp, solve_pnp
from carmpose.solver.registration import register_point_sets

__all__ = [
    "CorrespondenceSet",
    "estimate_board_pose",
    "refine_gauss_newton",
    "solve_epnp",
    "solve_pnp",
    "register_point_sets",
]
