"""Multi-class dynamic OD demand estimation from heterogeneous observations."""

from .network import CLASSES, Link, Network, NetworkError, Path, PathSet, \
    enumerate_paths, load_network, load_od_pairs, save_network, validate_network
from .dnl import CumulativeCurveSet, DnlConfig, LinkStateTensor, \
    assign_path_flows, extract_density, extract_link_flow, extract_travel_time, \
    route_choice, run_dnl
from .dar import DarMatrixSet, IntervalCumulator, extract_dar, \
    reconstruct_density, reconstruct_flow
from .estimator import ConvergenceTrace, EstimatorConfig, LossWeights, \
    ObservationSet, ObsRow, ObsStream, build_aggregation, compute_gradient, \
    compute_loss, solve_dode
from .observation import Detection, DensitySnapshot, MatchResult, \
    build_density_observation, detections_to_snapshot, generate_detections, \
    inject_noise, match_detections, select_consistent_links, two_stage_filter
from .benchmark import OdSampleSet, PcBasis, SpsaConfig, fit_pca, \
    generate_od_samples, solve_pc_spsa
from .scenario import ScenarioConfig, compare_solvers, grid_network, \
    run_scenario, sensitivity_suite, toy_network

__version__ = "0.1.0"
