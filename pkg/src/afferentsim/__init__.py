"""Tactile afferent simulator: layered-skin FEM plus spiking neuron models.

The pipeline has two stages.  A plane-strain finite-element model of
layered skin under a vibrating rigid indenter produces von Mises stress
traces at afferent sampling nodes; per-afferent neural models (SA, RA, PC)
filter those traces, convert them to membrane drive through a saturating
transform, and emit spike trains from a leaky integrate-and-fire unit.
NSGA-II fitting and firing-rate analyses sit on top.

Units: mm / MPa / ms inside the FEM, Pa at the neural interface, mV for
membrane potentials, impulses-per-second (ips) for rates.
"""

__version__ = "0.1.0"

from .errors import (
    AfferentSimError,
    InvertedElementError,
    NumericalError,
    ValidationError,
)
from .mesh import (
    AFFERENT_TYPES,
    GeometrySpec,
    MaterialLayer,
    Mesh,
    build_mesh,
    default_afferent_depths,
    default_material_layers,
    load_mesh,
    save_mesh,
)
from .fem import (
    IndenterSpec,
    IndentationResult,
    StiffnessSystem,
    StressTrace,
    contact_active_set,
    plane_strain_d,
    recover_stress,
    run_indentation,
    solve_step,
    surface_deflection,
    von_mises,
)
from .stimulus import (
    StimulusSpec,
    bandpass_noise,
    builtin_protocol,
    diharmonic,
    load_protocol,
    save_protocol,
    sinusoid,
)
from .neural import (
    AfferentParams,
    DriveTrace,
    SpikeTrain,
    abs_difference_filter,
    count_spikes_in_window,
    default_afferent_params,
    derivative,
    drive_for_stress,
    filtered_inputs,
    load_spike_trains,
    moving_average_abs,
    run_afferent,
    save_spike_trains,
    simulate_lif,
    stress_to_drive,
)
from .optimize import (
    FitOutcome,
    ObservedRateSet,
    ParetoFront,
    RateEvaluator,
    fit_afferent,
    gene_bounds,
    genes_to_params,
    nsga2,
    objectives,
    params_to_genes,
    predict_rates,
    recover_parameters,
    select_candidate,
)
from .analysis import (
    RateRecord,
    RegressionReport,
    firing_rate,
    raster,
    rate_records_to_csv,
    regression,
)
from .config import RunConfig, config_from_dict, load_config

__all__ = [
    "AFFERENT_TYPES",
    "AfferentParams",
    "AfferentSimError",
    "DriveTrace",
    "FitOutcome",
    "GeometrySpec",
    "IndentationResult",
    "IndenterSpec",
    "InvertedElementError",
    "MaterialLayer",
    "Mesh",
    "NumericalError",
    "ObservedRateSet",
    "ParetoFront",
    "RateEvaluator",
    "RateRecord",
    "RegressionReport",
    "RunConfig",
    "SpikeTrain",
    "StiffnessSystem",
    "StimulusSpec",
    "StressTrace",
    "ValidationError",
    "abs_difference_filter",
    "bandpass_noise",
    "build_mesh",
    "builtin_protocol",
    "config_from_dict",
    "contact_active_set",
    "count_spikes_in_window",
    "default_afferent_depths",
    "default_afferent_params",
    "default_material_layers",
    "derivative",
    "diharmonic",
    "drive_for_stress",
    "filtered_inputs",
    "firing_rate",
    "fit_afferent",
    "gene_bounds",
    "genes_to_params",
    "load_config",
    "load_mesh",
    "load_protocol",
    "load_spike_trains",
    "moving_average_abs",
    "nsga2",
    "objectives",
    "params_to_genes",
    "plane_strain_d",
    "predict_rates",
    "raster",
    "rate_records_to_csv",
    "recover_parameters",
    "recover_stress",
    "regression",
    "run_afferent",
    "run_indentation",
    "save_mesh",
    "save_protocol",
    "save_spike_trains",
    "select_candidate",
    "simulate_lif",
    "sinusoid",
    "solve_step",
    "stress_to_drive",
    "surface_deflection",
    "von_mises",
    "__version__",
]
