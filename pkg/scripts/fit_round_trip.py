#!/usr/bin/env python3
"""Optimizer self-test: synthesize observed rates from the shipped RA
parameters, then try to recover them with the multi-objective fit.

    python3 scripts/fit_round_trip.py [--budget 10000] [--seed 0]

Reports the selected candidate, its per-frequency squared-error objectives,
and the objective sum (0 means the synthetic rates were matched exactly).
Full budget takes ~30 s after the stress bank is cached (~15 s cold).
Note: several (tau_m, a, alpha') combinations can produce identical spike
counts, so recovered parameter values may differ from the generator while
the objective sum is still 0 — rate data alone does not pin the parameters.
"""

import argparse
import sys
import time

from afferentsim import cli, config, mesh, neural, optimize, stimulus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--budget", type=int, default=10000)
    parser.add_argument("--population", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--afferent", default="RA", choices=["SA", "RA", "PC"])
    parser.add_argument("--cache-dir", default="out-roundtrip/cache/stress")
    args = parser.parse_args()

    cfg = config.config_from_dict({})
    m = mesh.build_mesh(cfg.geometry, cfg.materials)
    specs = stimulus.builtin_protocol("appendixA", dt_ms=cfg.dt_ms)
    bank = cli.compute_stress_bank(cfg, m, None, specs, args.cache_dir)
    type_bank = {
        (s.freq_hz, s.amplitude_um): bank[s.stimulus_id][args.afferent]
        for s in specs
    }

    truth = neural.default_afferent_params()[args.afferent]
    t0 = time.perf_counter()
    outcome = optimize.recover_parameters(
        truth, type_bank, seed=args.seed,
        budget=args.budget, population_size=args.population,
    )
    elapsed = time.perf_counter() - t0

    picked = outcome.selected
    print(f"\ngenerator : {truth.to_dict()}")
    print(f"recovered : {picked.to_dict()}")
    print(f"objectives: "
          + ", ".join(f"{f:.0f} Hz = {o:.3f}" for f, o in
                      zip(optimize.OBJECTIVE_FREQS, outcome.selected_objectives)))
    print(f"objective sum: {outcome.objective_sum:.4f} ips^2 "
          f"({elapsed:.1f} s, front size {outcome.front.front_indices().size})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
