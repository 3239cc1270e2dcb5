"""Pipeline driver: mesh | simulate | fit | validate.

Every command takes --config (JSON, see config module), with optional
--seed / --out / --protocol overrides.  Exit codes: 0 success, 2 validation
error, 3 numerical failure.  Concurrent runs against one output directory
are rejected via a `.lock` file.  `AFFERENTSIM_THREADS` caps the number of
parallel candidate evaluations during fitting.

FEM results are cached under <out>/cache/stress keyed by the content of
(mesh, materials, indenter, stimulus), so re-running a protocol or fitting
against an existing bank skips the solver entirely.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager

import numpy as np

from . import __version__
from .analysis import RateRecord, rate_records_to_csv, regression
from .config import RunConfig, load_config
from .config import save_resolved_config
from .errors import AfferentSimError, NumericalError, ValidationError
from .fem import IndenterSpec, StiffnessSystem, StressTrace, run_indentation
from .mesh import AFFERENT_TYPES, build_mesh, save_mesh
from .neural import (
    AfferentParams,
    default_afferent_params,
    run_afferent,
    save_spike_trains,
)
from .optimize import (
    ObservedRateSet,
    OBJECTIVE_FREQS,
    fit_afferent,
    front_to_csv,
    predict_rates,
    selected_to_json,
)
from .stimulus import StimulusSpec, builtin_protocol, load_protocol

logger = logging.getLogger("afferentsim")

_BUILTIN_PROTOCOLS = ("appendixA", "appendixB", "appendixC")


@contextmanager
def output_lock(out_dir: str):
    """Reject concurrent invocations against the same output directory."""
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(
            f"output directory {out_dir!r} is in use by another invocation "
            f"(remove {path} if that run crashed)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        try:
            os.unlink(path)
        except OSError:
            pass


def _provenance(cfg: RunConfig) -> str:
    return f"afferentsim={__version__} config={cfg.content_hash()} seed={cfg.seed}"


def _resolve_protocol(cfg: RunConfig) -> list[StimulusSpec]:
    if cfg.protocol in _BUILTIN_PROTOCOLS:
        return builtin_protocol(cfg.protocol, dt_ms=cfg.dt_ms, base_seed=cfg.seed)
    return load_protocol(cfg.protocol)


def _indenter_for(cfg: RunConfig, trace: np.ndarray, dt_ms: float) -> IndenterSpec:
    return IndenterSpec(
        diameter_mm=cfg.indenter_diameter_mm,
        center_x_mm=cfg.indenter_center_x_mm,
        pre_indentation_mm=cfg.indenter_pre_indentation_mm,
        displacement_trace=trace,
        dt_ms=dt_ms,
    )


def _stimulus_cache_key(cfg: RunConfig, mesh_hash: str, spec: StimulusSpec) -> str:
    blob = json.dumps({
        "mesh": mesh_hash,
        "materials": [
            [m.name, repr(m.elastic_modulus_mpa), repr(m.poisson_ratio),
             repr(m.depth_range[0]), repr(m.depth_range[1])]
            for m in cfg.materials
        ],
        "indenter": {
            "diameter_mm": repr(cfg.indenter_diameter_mm),
            "center_x_mm": repr(cfg.indenter_center_x_mm),
            "pre_indentation_mm": repr(cfg.indenter_pre_indentation_mm),
        },
        "stimulus": spec.content_key(),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def compute_stress_bank(
    cfg: RunConfig, mesh, system: StiffnessSystem | None,
    specs: list[StimulusSpec], cache_dir: str,
) -> dict[str, dict[str, StressTrace]]:
    """Per-stimulus, per-afferent stress traces, cache-backed."""
    os.makedirs(cache_dir, exist_ok=True)
    mesh_hash = mesh.content_hash()
    bank: dict[str, dict[str, StressTrace]] = {}
    for spec in specs:
        key = _stimulus_cache_key(cfg, mesh_hash, spec)
        files = {a: os.path.join(cache_dir, f"{key}_{a}.csv") for a in AFFERENT_TYPES}
        if all(os.path.exists(p) for p in files.values()):
            logger.info("cache hit: FEM stage skipped for %s", spec.stimulus_id)
            bank[spec.stimulus_id] = {
                a: StressTrace.from_csv(p) for a, p in files.items()
            }
            continue
        if system is None:
            system = StiffnessSystem(mesh)
        displacement = spec.generate()
        indenter = _indenter_for(cfg, displacement, spec.dt_ms)
        try:
            result = run_indentation(mesh, indenter, system=system)
        except NumericalError as exc:
            raise NumericalError(f"stimulus {spec.stimulus_id}: {exc}") from exc
        for a, trace in result.stress_traces.items():
            trace.to_csv(files[a], provenance=f"cache-key={key}")
        bank[spec.stimulus_id] = result.stress_traces
        logger.info("FEM solved %s (%d steps)", spec.stimulus_id, displacement.size)
    return bank


def _load_afferent_params(source: str) -> dict[str, AfferentParams]:
    """Default table, or overrides from a selected-candidate/params JSON."""
    params = default_afferent_params()
    if source == "default":
        return params
    try:
        with open(source) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read afferent params {source}: {exc}") from exc
    if "afferent" in raw and "params" in raw:  # selected-candidate export
        p = AfferentParams.from_dict(raw["params"])
        params[p.afferent_type] = p
    else:  # mapping {type: params}
        for atype, rec in raw.items():
            if atype not in AFFERENT_TYPES:
                raise ValidationError(f"{source}: unknown afferent type {atype!r}")
            params[atype] = AfferentParams.from_dict(rec)
    return params


def _spec_descriptor(spec: StimulusSpec) -> tuple[float, float]:
    """(freq_hz, amplitude_um) columns for the rate table."""
    if spec.kind == "sinusoid":
        return spec.freq_hz, spec.amplitude_um
    if spec.kind == "diharmonic":
        return spec.freq_hz, spec.amplitude_um
    return (spec.lo_hz + spec.hi_hz) / 2.0, spec.rms_um


# --------------------------------------------------------------------------
# commands


def cmd_mesh(cfg: RunConfig) -> int:
    mesh = build_mesh(cfg.geometry, cfg.materials)
    out = cfg.output_dir
    save_mesh(mesh, os.path.join(out, "mesh.txt"))
    meta = {
        "nodes": mesh.n_nodes,
        "elements": mesh.n_elements,
        "mesh_hash": mesh.content_hash(),
        "afferent_nodes": dict(sorted(mesh.afferent_nodes.items())),
        "provenance": _provenance(cfg),
    }
    with open(os.path.join(out, "mesh_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"mesh: {mesh.n_nodes} nodes, {mesh.n_elements} elements -> {out}/mesh.txt")
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    out = cfg.output_dir
    specs = _resolve_protocol(cfg)
    mesh = build_mesh(cfg.geometry, cfg.materials)
    save_mesh(mesh, os.path.join(out, "mesh.txt"))
    bank = compute_stress_bank(
        cfg, mesh, None, specs, os.path.join(out, "cache", "stress")
    )
    params = _load_afferent_params(cfg.afferent_params_source)
    prov = _provenance(cfg)

    stress_dir = os.path.join(out, "stress")
    os.makedirs(stress_dir, exist_ok=True)
    trains = []
    records = []
    for spec in specs:
        freq, amp = _spec_descriptor(spec)
        for atype in AFFERENT_TYPES:
            trace = bank[spec.stimulus_id][atype]
            trace.to_csv(
                os.path.join(stress_dir, f"{spec.stimulus_id}_{atype}.csv"),
                provenance=prov,
            )
            train = run_afferent(trace, params[atype], record_membrane=False)
            train.meta.update({"stimulus_id": spec.stimulus_id})
            trains.append(train)
            n = int(np.sum(
                (train.spike_times_ms >= spec.discard_ms)
                & (train.spike_times_ms < spec.discard_ms + spec.window_ms)
            ))
            records.append(RateRecord(
                afferent_type=atype, stimulus_id=spec.stimulus_id,
                freq_hz=freq, amplitude_um=amp,
                predicted_ips=n / (spec.window_ms / 1000.0),
                window_ms=spec.window_ms,
            ))

    save_spike_trains(trains, os.path.join(out, "spikes.jsonl"))
    rate_records_to_csv(records, os.path.join(out, "rates.csv"), provenance=prov)
    save_resolved_config(cfg, os.path.join(out, "config_resolved.json"))
    print(
        f"simulate: {len(specs)} stimuli x {len(AFFERENT_TYPES)} afferents -> "
        f"{out}/rates.csv ({len(records)} rows)"
    )
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    """Static press: 50 um probe, 1 mm indentation, deflection every 0.5 mm."""
    out = cfg.output_dir
    mesh = build_mesh(cfg.geometry, cfg.materials)
    indenter = IndenterSpec(
        diameter_mm=0.05, center_x_mm=0.0, pre_indentation_mm=1.0,
        displacement_trace=np.zeros(1), dt_ms=cfg.dt_ms,
    )
    result = run_indentation(
        mesh, indenter, record_deflection=True, deflection_spacing_mm=0.5
    )
    xs = result.deflection_x_mm
    profile = result.deflection_mm[0]
    prov = _provenance(cfg)
    with open(os.path.join(out, "deflection.csv"), "w") as fh:
        fh.write(f"# provenance: {prov}\n")
        fh.write("x_mm,deflection_mm\n")
        for x, w in zip(xs, profile):
            fh.write(f"{float(x)!r},{float(w)!r}\n")

    max_deflection = float(profile.max())
    max_ok = 0.9 <= max_deflection <= 1.1
    monotone = bool(np.all(np.diff(profile) < 0))
    report = {
        "max_deflection_mm": max_deflection,
        "max_deflection_in_range": max_ok,
        "monotone_decay": monotone,
        "passed": max_ok and monotone,
        "provenance": prov,
    }
    with open(os.path.join(out, "validation_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"validate: max deflection {max_deflection:.4f} mm "
        f"(in [0.9, 1.1]: {max_ok}), monotone decay: {monotone}"
    )
    if not report["passed"]:
        raise ValidationError("deflection validation failed; see validation_report.json")
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    out = cfg.output_dir
    if cfg.fit.observed_rates_csv is None:
        raise ValidationError("fit.observed_rates_csv must be set in the config")
    specs = _resolve_protocol(cfg)
    sin_specs = [s for s in specs if s.kind == "sinusoid"]
    if not sin_specs:
        raise ValidationError("fit needs a sinusoid protocol (no sinusoids found)")
    mesh = build_mesh(cfg.geometry, cfg.materials)
    bank = compute_stress_bank(
        cfg, mesh, None, sin_specs, os.path.join(out, "cache", "stress")
    )
    prov = _provenance(cfg)

    for atype in cfg.fit.afferents:
        observed = ObservedRateSet.from_csv(cfg.fit.observed_rates_csv, atype)
        type_bank = {
            (s.freq_hz, s.amplitude_um): bank[s.stimulus_id][atype]
            for s in sin_specs
        }
        logger.info(
            "fitting %s: %d observed conditions, budget %d",
            atype, len(observed.records), cfg.fit.budget,
        )
        outcome = fit_afferent(
            atype, type_bank, observed, seed=cfg.seed,
            budget=cfg.fit.budget, population_size=cfg.fit.population,
        )
        front_to_csv(
            outcome.front, atype, os.path.join(out, f"front_{atype}.csv"),
            provenance=prov,
        )
        selected_to_json(
            outcome, os.path.join(out, f"selected_{atype}.json"),
            extra_provenance={"config": cfg.content_hash(), "version": __version__},
        )

        predicted = dict(
            ((f, a), r) for f, a, r in predict_rates(outcome.selected, type_bank)
        )
        obs_map = {(f, a): r for f, a, r in observed.records}
        records = [
            RateRecord(
                afferent_type=atype,
                stimulus_id=f"sin_{f:03.0f}hz_{a:06.2f}um",
                freq_hz=f, amplitude_um=a,
                predicted_ips=predicted[(f, a)],
                observed_ips=obs_map.get((f, a)),
                window_ms=245.0 if f == 20.0 else 100.0,
            )
            for (f, a) in sorted(predicted)
        ]
        rate_records_to_csv(
            records, os.path.join(out, f"fit_rates_{atype}.csv"), provenance=prov
        )

        pairs = [(obs_map[(f, a)], predicted[(f, a)]) for (f, a) in sorted(obs_map)]
        reg: dict[str, object] = {}
        try:
            pooled = regression([p[0] for p in pairs], [p[1] for p in pairs])
            reg["pooled"] = pooled.to_dict()
        except ValidationError as exc:
            reg["pooled"] = {"error": str(exc)}
        per_freq = {}
        for f in OBJECTIVE_FREQS:
            sub = [(o, p) for (ff, _), (o, p) in zip(sorted(obs_map), pairs) if ff == f]
            if len(sub) >= 3:
                try:
                    per_freq[f"{int(f)}"] = regression(
                        [o for o, _ in sub], [p for _, p in sub]
                    ).to_dict()
                except ValidationError as exc:
                    per_freq[f"{int(f)}"] = {"error": str(exc)}
        reg["per_frequency"] = per_freq
        reg["provenance"] = prov
        with open(os.path.join(out, f"regression_{atype}.json"), "w") as fh:
            json.dump(reg, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(
            f"fit {atype}: objective sum {outcome.objective_sum:.4f} ips^2, "
            f"front size {outcome.front.front_indices().size} -> "
            f"{out}/selected_{atype}.json"
        )
    save_resolved_config(cfg, os.path.join(out, "config_resolved.json"))
    return 0


# --------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afferentsim",
        description="Tactile afferent simulator: skin FEM + spiking neural models",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "mesh": "build and export the skin mesh",
        "simulate": "run a stimulus protocol end to end (FEM + afferents + rates)",
        "fit": "fit afferent parameters to observed rates (NSGA-II)",
        "validate": "static indentation check against the deflection profile",
    }
    for name, help_text in helps.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument(
            "--protocol", default=None,
            help="appendixA|appendixB|appendixC or a protocol JSON path",
        )
    return parser


_COMMANDS = {
    "mesh": cmd_mesh,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        if args.protocol is not None:
            cfg.protocol = args.protocol
        cfg.validate()
        os.makedirs(cfg.output_dir, exist_ok=True)
        with output_lock(cfg.output_dir):
            return _COMMANDS[args.command](cfg)
    except ValidationError as exc:
        logger.error("validation error: %s", exc)
        return 2
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return 3
    except AfferentSimError as exc:  # pragma: no cover - unexpected subclass
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
