"""Ellipsoidal application-set approximation for MPC from one closed-loop run."""

from .appset import (
    AppCostError,
    AppCostEvaluator,
    AppCostSpec,
    ClosedLoopSetup,
    Ellipsoid,
    FisherInfo,
    app_cost,
    app_hessian,
    application_ellipsoid,
    chi2_quantile,
    classify,
    classify_true,
    contains,
    identification_ellipsoid,
    resolve_gamma,
    tracking_cost,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    compare_methods,
    example1_config,
    example2_config,
    run_experiment,
)
from .model import AffineTerm, NoiseSpec, ParametrizedModel, as_theta, simulate_open_loop
from .mpc import (
    ActiveSet,
    ChannelReference,
    ClosedLoopError,
    CondensedQp,
    KktSystem,
    MpcConfig,
    QpConvergenceError,
    QpInfeasibleError,
    QpSolution,
    Reference,
    SimulationCounter,
    SingularKktError,
    Trajectory,
    assemble_active_system,
    build_kkt,
    condense,
    run_closed_loop,
    solve_inequality_qp,
    solve_kkt,
    trajectory_to_csv,
)
from .scenario import ScenarioSet, fd_hessian, sample_scenarios, scenario_constraints, scenario_csv
from .sensitivity import (
    SensitivityBundle,
    StepSensitivity,
    build_kkt_derivatives,
    kkt_sensitivity,
    predict_outputs,
    propagate_closed_loop,
    qp_data_derivatives,
    simulate_frozen_active_set,
)

__version__ = "0.1.0"
