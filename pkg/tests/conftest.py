"""Shared fixtures; the expensive FEM artifacts are session-scoped."""

import numpy as np
import pytest

from afferentsim import cli, config, fem, mesh


@pytest.fixture(scope="session")
def default_config():
    return config.config_from_dict({})


@pytest.fixture(scope="session")
def default_mesh(default_config):
    return mesh.build_mesh(default_config.geometry, default_config.materials)


@pytest.fixture(scope="session")
def default_system(default_mesh):
    return fem.StiffnessSystem(default_mesh)


@pytest.fixture(scope="session")
def appendix_a_bank(default_config, default_mesh, default_system, tmp_path_factory):
    """stimulus_id -> {afferent -> StressTrace} for the 37-sinusoid bank."""
    cache = tmp_path_factory.mktemp("stress_cache")
    specs = cli._resolve_protocol(default_config)
    bank = cli.compute_stress_bank(
        default_config, default_mesh, default_system, specs, str(cache)
    )
    return specs, bank


@pytest.fixture(scope="session")
def fifty_um_traces(default_config, default_mesh, default_system):
    """PC stress traces for 50 um sinusoids at 20/50/100/300 Hz."""
    from afferentsim import stimulus

    out = {}
    for freq in (20.0, 50.0, 100.0, 300.0):
        duration = 345.0 if freq == 20.0 else 200.0
        trace = stimulus.sinusoid(freq, 50.0, duration)
        indenter = fem.IndenterSpec(
            diameter_mm=default_config.indenter_diameter_mm,
            displacement_trace=trace,
            dt_ms=0.5,
        )
        result = fem.run_indentation(default_mesh, indenter, system=default_system)
        out[freq] = result.stress_traces["PC"]
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
