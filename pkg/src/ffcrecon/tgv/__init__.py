"""Joint Frobenius-TGV model-based reconstruction."""

from .irgn import SolverConfig, irgn_reconstruct, irgn_schedule, run_irgn
from .pdhg import LinearOp, PDResult, SolverError, TGVProblem, pd_linesearch_solve
from .prox import prox_dual_r, prox_dual_z0, prox_dual_z1, prox_primal_u

__all__ = [
    "LinearOp", "PDResult", "SolverConfig", "SolverError", "TGVProblem",
    "irgn_reconstruct", "irgn_schedule", "pd_linesearch_solve", "prox_dual_r",
    "prox_dual_z0", "prox_dual_z1", "prox_primal_u", "run_irgn",
]
