"""Safe exploration with sampled backup control barrier functions.

Core pieces: control-affine dynamics with flow sensitivities (`dynamics`),
backup suites and the blended neural backup policy (`backup`), the sampled
soft-min/soft-max barrier (`barrier`), the minimum-intervention QP shield
(`shield`), replay-buffer SAC training of the neural backup policy (`rl`,
`sac`, `nets`), a grid dynamic-programming value-function oracle (`hj`), and
the inverted-pendulum benchmark plus CLI (`benchmark`, `runner`, `cli`).
"""

from .dynamics import (Box, AdmissibleBox, FlowConfig, SystemModel,
                       IntegrationDivergedError, flow, flow_sensitivity_forward,
                       flow_sensitivity_adjoint, make_pendulum, simulate)
from .backup import (BackupSuite, HomotopyXi, MlpPolicy, QuadraticBackupSet,
                     SaturatedLinearPolicy, active_backup_index,
                     neural_backup_control, neural_backup_jacobian,
                     neural_backup_set_value, make_pendulum_suite,
                     save_mlp_policy, load_mlp_policy)
from .barrier import (BarrierConfig, BarrierEvaluation, SoftParams, softmin_rho,
                      softmax_rho, h_j_value, h_value, grad_h, beta_value,
                      evaluate_barrier, epsilon_s_estimate, h_star_exact)
from .shield import (QpResult, ShieldState, solve_safety_qp,
                     augmented_backup_control, shield_control)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
