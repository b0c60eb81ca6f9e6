"""Observer-based uncertainty learning, dynamic inversion and tube-tightened
tracking MPC with a learned terminal value."""

from .adaptive_loop import (
    Buffer,
    IntegratorTask,
    LearningCurve,
    TransitionTuple,
    ValueEstimate,
    cost_to_go,
    run_episode,
    train,
    update_value,
)
from .approximator import SignGradientRegressor
from .exceptions import (
    ConfigurationError,
    ContractViolation,
    DeepMPCError,
    InfeasibleProblem,
    IntegrationBlowUp,
    NonConvergence,
    SingularControlMatrix,
)
from .harness import (
    Metrics,
    QuinticPath,
    RunConfig,
    TrajectoryLog,
    compute_metrics,
    export_csv,
    export_plot_script,
    read_csv,
    run_scenario,
)
from .inversion import ReferenceModel, SlackAugmentation, augment_slack, inversion_control, second_order_gain
from .observer import ErrorTriple, ModifiedStateObserver, ObserverState, error_triple, observer_derivative
from .plant import (
    DisturbanceScenario,
    DoubleIntegrator,
    PlanarArm,
    PlantModel,
    Push,
    ScalarPlant,
    eval_known_dynamics,
    eval_true_dynamics,
    external_wrench,
    integrate_step,
    load_scenario,
)
from .rmpc import (
    ArtificialEquilibrium,
    LinearConstraints,
    LinearNominalModel,
    MpcConfig,
    NominalModel,
    PredictedTrajectory,
    RobustMPC,
    control_law,
    incremental_lyapunov,
    objective,
    solve_rmpc,
    terminal_set_contains,
    tightening_margin,
)

__version__ = "0.1.0"
