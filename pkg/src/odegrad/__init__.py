"""odegrad: reverse-accurate neural-ODE gradients via discrete adjoint
time integration with binomial checkpointing."""

from .adjoint import (
    AdjointState,
    GradientExplosionError,
    adjoint_terminal,
    continuous_adjoint_solve,
    euler_adjoint_step,
    fd_gradient,
    grad,
    inject_observation,
    loss_value,
    rel_error,
    rk_adjoint_step,
    theta_adjoint_step,
)
from .checkpointing import (
    CheckpointPolicy,
    CheckpointStore,
    ScheduleAction,
    dp_optimal_count,
    revolve_count,
    revolve_schedule,
)
from .integrators import (
    AdaptiveController,
    CallableField,
    Field,
    FixedController,
    FixedGridController,
    IntegrationError,
    MlpField,
    NfeCounters,
    StepRecord,
    StiffnessError,
    explicit_rk_step,
    integrate,
    theta_step,
)
from .linalg import ConvergenceError, SolverConfig, gmres, newton_solve
from .losses import LossSpec, MinMaxScaling, loss_and_grad_seed, terminal_loss
from .nn import (
    ForwardCache,
    MlpModel,
    MlpSpec,
    init_model,
    jvp_input,
    load_model,
    mlp_forward,
    mlp_spec,
    model_from_json,
    model_to_json,
    save_model,
    vjp_input,
    vjp_params,
)
from .tableaux import SCHEME_NAMES, ButcherTableau, Scheme, tableau_catalog
from .training import (
    AdamWConfig,
    Dataset,
    OptimizerState,
    TrainConfig,
    adamw_step,
    generate_robertson_dataset,
    minmax_normalize,
    robertson_rhs,
    train,
)

__version__ = "0.1.0"
