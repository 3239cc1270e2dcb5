import json
import logging
import os

import numpy as np
import pytest

from afferentsim import cli, config, mesh, neural, stimulus
from afferentsim.errors import ValidationError


def write_config(tmp_path, raw, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def write_protocol(tmp_path, specs, name="protocol.json"):
    path = tmp_path / name
    stimulus.save_protocol(list(specs), path, name="custom")
    return str(path)


def sin_spec(freq, amp, duration=200.0, window=100.0):
    return stimulus.StimulusSpec(
        stimulus_id=f"sin_{freq:03.0f}hz_{amp:06.2f}um", kind="sinusoid",
        duration_ms=duration, dt_ms=0.5, discard_ms=100.0, window_ms=window,
        freq_hz=freq, amplitude_um=amp,
    )


# ------------------------------------------------------------------ config


def test_config_defaults_from_empty_dict():
    cfg = config.config_from_dict({})
    cfg.validate()
    assert cfg.geometry.domain_width_mm == 20.0
    assert cfg.geometry.surface_element_mm == 0.2
    assert [m.name for m in cfg.materials] == [
        "stratum_corneum", "epidermis", "dermis", "subcutaneous"
    ]
    assert cfg.dt_ms == 0.5
    assert cfg.protocol == "appendixA"
    assert cfg.seed == 0
    assert cfg.indenter_diameter_mm == 1.0
    assert cfg.fit.afferents == ("SA", "RA", "PC")
    assert cfg.fit.population == 100 and cfg.fit.budget == 10000


def test_config_unknown_key_rejected():
    with pytest.raises(ValidationError, match="unknown"):
        config.config_from_dict({"indenter_diameter": 1.0})
    with pytest.raises(ValidationError):
        config.config_from_dict({"geometry": {"width": 3.0}})


def test_config_geometry_error_names_field():
    with pytest.raises(ValidationError, match="domain_width_mm"):
        config.config_from_dict({"geometry": {"domain_width_mm": 0.0}})


def test_config_seed_type():
    with pytest.raises(ValidationError):
        config.config_from_dict({"seed": True})
    with pytest.raises(ValidationError):
        config.config_from_dict({"seed": 1.5})
    assert config.config_from_dict({"seed": 3}).seed == 3


def test_config_hash_tracks_content():
    a = config.config_from_dict({})
    b = config.config_from_dict({})
    c = config.config_from_dict({"seed": 1})
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != c.content_hash()
    # output directory is not part of the scientific content
    d = config.config_from_dict({"output_dir": "elsewhere"})
    assert d.content_hash() == a.content_hash()


def test_config_resolved_round_trip(tmp_path):
    cfg = config.config_from_dict({"seed": 5, "protocol": "appendixB"})
    path = tmp_path / "resolved.json"
    config.save_resolved_config(cfg, path)
    again = config.load_config(str(path))
    assert again.to_dict() == cfg.to_dict()
    assert again.content_hash() == cfg.content_hash()


def test_config_custom_materials_validated():
    raw = {"materials": [
        {"name": "a", "elastic_modulus_mpa": 1.0, "poisson_ratio": 0.3,
         "depth_top_mm": 0.0, "depth_bottom_mm": 1.0},
        {"name": "b", "elastic_modulus_mpa": 1.0, "poisson_ratio": 0.3,
         "depth_top_mm": 1.5, "depth_bottom_mm": 8.0},
    ]}
    with pytest.raises(ValidationError, match="geometry/materials"):
        config.config_from_dict(raw)


# --------------------------------------------------------------------- CLI


def test_cli_mesh_outputs(tmp_path):
    cfg_path = write_config(tmp_path, {})
    out = tmp_path / "out"
    assert cli.main(["mesh", "--config", cfg_path, "--out", str(out)]) == 0
    meta = json.loads((out / "mesh_meta.json").read_text())
    built = mesh.load_mesh(out / "mesh.txt", config.config_from_dict({}).materials)
    assert meta["nodes"] == built.n_nodes
    assert meta["elements"] == built.n_elements
    assert meta["mesh_hash"] == built.content_hash()
    assert set(meta["afferent_nodes"]) == {"SA", "RA", "PC"}
    assert "config=" in meta["provenance"]

    out2 = tmp_path / "out2"
    assert cli.main(["mesh", "--config", cfg_path, "--out", str(out2)]) == 0
    assert (out / "mesh.txt").read_bytes() == (out2 / "mesh.txt").read_bytes()


def test_cli_validate_default_geometry(tmp_path):
    cfg_path = write_config(tmp_path, {})
    out = tmp_path / "out"
    assert cli.main(["validate", "--config", cfg_path, "--out", str(out)]) == 0
    report = json.loads((out / "validation_report.json").read_text())
    assert report["passed"] is True
    assert 0.9 <= report["max_deflection_mm"] <= 1.1
    assert report["monotone_decay"] is True
    lines = (out / "deflection.csv").read_text().splitlines()
    assert lines[1] == "x_mm,deflection_mm"
    first = lines[2].split(",")
    assert float(first[0]) == 0.0
    assert float(first[1]) == report["max_deflection_mm"]


def test_cli_simulate_small_protocol(tmp_path):
    protocol = write_protocol(
        tmp_path, [sin_spec(50.0, 113.60), sin_spec(50.0, 34.80)]
    )
    cfg_path = write_config(tmp_path, {"protocol": protocol})
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", cfg_path, "--out", str(out)]) == 0

    rates = [ln for ln in (out / "rates.csv").read_text().splitlines()
             if ln and not ln.startswith("#")]
    assert rates[0] == "afferent,stimulus_id,freq_hz,amplitude_um,predicted_ips,observed_ips"
    assert len(rates) == 1 + 2 * 3  # stimuli x afferent types
    spikes = (out / "spikes.jsonl").read_text().splitlines()
    assert len(spikes) == 6
    for line in spikes:
        rec = json.loads(line)
        assert set(rec) >= {"afferent", "params_hash", "dt", "spikes", "meta"}
        assert rec["meta"]["stimulus_id"].startswith("sin_050hz")
    stress_files = sorted(os.listdir(out / "stress"))
    assert len(stress_files) == 6
    assert (out / "config_resolved.json").exists()
    # the larger amplitude drives the RA afferent at least as hard
    def ra_rate(amp_tag):
        for ln in rates[1:]:
            parts = ln.split(",")
            if parts[0] == "RA" and amp_tag in parts[1]:
                return float(parts[4])
        raise AssertionError(amp_tag)
    assert ra_rate("113.60") >= ra_rate("034.80")


def test_cli_simulate_zero_amplitude_is_silent(tmp_path):
    protocol = write_protocol(tmp_path, [sin_spec(50.0, 0.0)])
    cfg_path = write_config(tmp_path, {"protocol": protocol})
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", cfg_path, "--out", str(out)]) == 0
    for ln in (out / "rates.csv").read_text().splitlines():
        if ln.startswith(("SA", "RA", "PC")):
            assert float(ln.split(",")[4]) == 0.0


def test_cli_simulate_rerun_is_byte_identical(tmp_path, caplog):
    protocol = write_protocol(tmp_path, [sin_spec(50.0, 34.80)])
    cfg_path = write_config(tmp_path, {"protocol": protocol})
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", cfg_path, "--out", str(out)]) == 0
    exports = ["rates.csv", "spikes.jsonl", "config_resolved.json", "mesh.txt"]
    exports += [os.path.join("stress", p) for p in os.listdir(out / "stress")]
    before = {p: (out / p).read_bytes() for p in exports}

    with caplog.at_level(logging.INFO, logger="afferentsim"):
        assert cli.main(["simulate", "--config", cfg_path, "--out", str(out)]) == 0
    assert "cache hit" in caplog.text  # FEM stage skipped on the rerun
    for p, blob in before.items():
        assert (out / p).read_bytes() == blob, p


def test_cli_seed_override_lands_in_outputs(tmp_path):
    protocol = write_protocol(tmp_path, [sin_spec(50.0, 0.0)])
    cfg_path = write_config(tmp_path, {"protocol": protocol})
    out = tmp_path / "out"
    assert cli.main([
        "simulate", "--config", cfg_path, "--out", str(out), "--seed", "7"
    ]) == 0
    resolved = json.loads((out / "config_resolved.json").read_text())
    assert resolved["seed"] == 7


def test_cli_lock_rejects_concurrent_use(tmp_path):
    cfg_path = write_config(tmp_path, {})
    out = tmp_path / "out"
    out.mkdir()
    (out / ".lock").write_text("12345\n")
    assert cli.main(["mesh", "--config", cfg_path, "--out", str(out)]) == 2
    (out / ".lock").unlink()
    assert cli.main(["mesh", "--config", cfg_path, "--out", str(out)]) == 0
    assert not (out / ".lock").exists()  # released on success


def test_cli_exit_codes_for_bad_input(tmp_path):
    bad_cfg = write_config(tmp_path, {"geometry": {"domain_width_mm": 0.0}})
    assert cli.main(["mesh", "--config", bad_cfg, "--out", str(tmp_path / "a")]) == 2
    assert cli.main(["mesh", "--config", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "b")]) == 2
    ok_cfg = write_config(tmp_path, {}, name="ok.json")
    assert cli.main(["simulate", "--config", ok_cfg, "--out", str(tmp_path / "c"),
                     "--protocol", "appendixZ"]) == 2


def test_cli_fit_end_to_end(tmp_path):
    specs = [
        sin_spec(20.0, 250.0, duration=345.0, window=245.0),
        sin_spec(50.0, 113.60),
        sin_spec(100.0, 55.39),
        sin_spec(300.0, 19.24),
    ]
    protocol = write_protocol(tmp_path, specs)
    cfg_path = write_config(tmp_path, {"protocol": protocol})
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", cfg_path, "--out", str(out)]) == 0

    # observed rates for the fit: the simulated RA rates, nudged slightly
    observed_csv = tmp_path / "observed.csv"
    rows = ["afferent,freq_hz,amplitude_um,rate_ips"]
    for ln in (out / "rates.csv").read_text().splitlines():
        parts = ln.split(",")
        if parts[0] == "RA":
            rows.append(f"RA,{parts[2]},{parts[3]},{float(parts[4]) + 1.0}")
    observed_csv.write_text("\n".join(rows) + "\n")

    fit_cfg = write_config(tmp_path, {
        "protocol": protocol,
        "fit": {"afferents": ["RA"], "observed_rates_csv": str(observed_csv),
                "population": 12, "budget": 36},
    }, name="fit.json")
    assert cli.main(["fit", "--config", fit_cfg, "--out", str(out)]) == 0

    front = (out / "front_RA.csv").read_text().splitlines()
    header = [ln for ln in front if not ln.startswith("#")][0]
    assert header == ("rank,objective_20,objective_50,objective_100,"
                      "objective_300,tau_m_ms,a3_pa_per_ms,alpha_prime")
    selected = json.loads((out / "selected_RA.json").read_text())
    assert selected["afferent"] == "RA"
    assert selected["provenance"]["budget"] == 36
    params = neural.AfferentParams.from_dict(selected["params"])
    params.validate()

    fit_rates = (out / "fit_rates_RA.csv").read_text().splitlines()
    data = [ln for ln in fit_rates if ln and not ln.startswith("#")][1:]
    assert len(data) == 4
    for ln in data:
        assert ln.split(",")[5] != ""  # observed column is filled

    reg = json.loads((out / "regression_RA.json").read_text())
    assert "pooled" in reg and "per_frequency" in reg
    if "error" not in reg["pooled"]:
        assert reg["pooled"]["n"] == 4


def test_cli_fit_requires_observed_rates(tmp_path):
    protocol = write_protocol(tmp_path, [sin_spec(50.0, 34.80)])
    cfg_path = write_config(tmp_path, {"protocol": protocol})
    assert cli.main(["fit", "--config", cfg_path,
                     "--out", str(tmp_path / "out")]) == 2


def test_cli_fit_rejects_empty_observed(tmp_path):
    protocol = write_protocol(tmp_path, [sin_spec(50.0, 34.80)])
    observed = tmp_path / "observed.csv"
    observed.write_text("afferent,freq_hz,amplitude_um,rate_ips\n")
    cfg_path = write_config(tmp_path, {
        "protocol": protocol,
        "fit": {"afferents": ["RA"], "observed_rates_csv": str(observed),
                "population": 4, "budget": 8},
    })
    assert cli.main(["fit", "--config", cfg_path,
                     "--out", str(tmp_path / "out")]) == 2


def test_load_afferent_params_sources(tmp_path):
    defaults = cli._load_afferent_params("default")
    assert set(defaults) == {"SA", "RA", "PC"}

    ra = neural.default_afferent_params()["RA"]
    tweaked = neural.AfferentParams.from_dict({**ra.to_dict(), "tau_m_ms": 123.0})
    selected = tmp_path / "selected.json"
    selected.write_text(json.dumps(
        {"afferent": "RA", "params": tweaked.to_dict(), "provenance": {}}
    ))
    loaded = cli._load_afferent_params(str(selected))
    assert loaded["RA"].tau_m_ms == 123.0
    assert loaded["SA"] == defaults["SA"]

    mapping = tmp_path / "mapping.json"
    mapping.write_text(json.dumps({"PC": tweaked.to_dict() | {
        "afferent_type": "PC", "a3_pa_per_ms": None, "a4_pa_per_ms2": 20.0
    }}))
    loaded = cli._load_afferent_params(str(mapping))
    assert loaded["PC"].a4_pa_per_ms2 == 20.0

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"XX": ra.to_dict()}))
    with pytest.raises(ValidationError):
        cli._load_afferent_params(str(bad))


def test_spec_descriptor_noise_uses_band_center():
    spec = stimulus.builtin_protocol("appendixC", base_seed=0)[0]
    freq, amp = cli._spec_descriptor(spec)
    assert freq == (spec.lo_hz + spec.hi_hz) / 2.0
    assert amp == spec.rms_um
