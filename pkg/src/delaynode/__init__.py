"""Learning time-delay system dynamics with a neural ODE carrying trainable delays.

The pipeline: simulate a delay differential equation (`dde`), discretize the
solution history into a finite grid (`discretize`), put a small tanh network
with trainable delays on top (`mlp`, `nodesim`), train it by exact
backpropagation through the integrator (`train`), and validate the learned
dynamics through extraction, bifurcation diagrams, and stability analysis
(`analysis`).  The `cli` module ties the stages into subcommands.
"""

from .analysis import (
    BifurcationDiagram,
    NddeModel,
    SurfaceGrid,
    bifurcation_scan,
    cluster_count,
    extract_ndde,
    hopf_oracle,
    local_extrema,
    simulate_ndde,
    surface_error,
)
from .dde import (
    DenseTrajectory,
    DivergenceError,
    HistorySpec,
    MackeyGlassNet,
    MgParams,
    TrajectoryDataset,
    generate_dataset,
    make_mg_delayed_rhs,
    mg_rhs,
    read_dataset,
    simulate_dde,
    write_dataset,
)
from .discretize import (
    build_dm,
    build_p,
    compose_discretized_rhs,
    constant_history_grid,
    dp_dtau,
    history_grid_from_window,
)
from .mlp import MlpParameters, backward, forward, init_glorot
from .nodesim import (
    NodeSystem,
    SimTape,
    backprop,
    integrate,
    load_model,
    loss,
    make_node_system,
    node_rhs,
    save_model,
    with_delays,
)
from .train import (
    AdamState,
    PairSet,
    TrainConfig,
    TrainLog,
    adam_init,
    adam_step,
    build_pairs,
    clamp_delays,
    detect_plateau,
    train,
)

__version__ = "0.1.0"
