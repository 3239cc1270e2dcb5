#!/usr/bin/env python3
"""Predicted firing rate versus amplitude and frequency for the shipped
afferent parameters, over the built-in sinusoid bank.

    python3 scripts/rate_trends.py [--out rates_table.csv]

Prints one block per afferent type: rows are amplitudes, columns are
frequencies (20/50/100/300 Hz), entries are rates in ips.  Reproduces the
qualitative picture: SA saturates at one spike per cycle and is silent at
300 Hz; RA and PC rates climb with both amplitude and frequency.  Takes
about 20 s on the default mesh (FEM dominated).
"""

import argparse
import sys

from afferentsim import analysis, cli, config, mesh, neural, stimulus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=None, help="also write a CSV table")
    parser.add_argument("--cache-dir", default="out-trends/cache/stress")
    args = parser.parse_args()

    cfg = config.config_from_dict({})
    m = mesh.build_mesh(cfg.geometry, cfg.materials)
    specs = stimulus.builtin_protocol("appendixA", dt_ms=cfg.dt_ms)
    bank = cli.compute_stress_bank(cfg, m, None, specs, args.cache_dir)
    params = neural.default_afferent_params()

    rates = {}
    for spec in specs:
        for atype, p in params.items():
            train = neural.run_afferent(bank[spec.stimulus_id][atype], p,
                                        record_membrane=False)
            rates[(atype, spec.freq_hz, spec.amplitude_um)] = analysis.firing_rate(
                train, spec.discard_ms, spec.window_ms
            )

    freqs = sorted(stimulus.SINUSOID_TABLE)
    all_amps = sorted({a for amps in stimulus.SINUSOID_TABLE.values() for a in amps})
    for atype in ("SA", "RA", "PC"):
        print(f"\n{atype} predicted rate (ips); rows: amplitude um, "
              f"cols: {[int(f) for f in freqs]} Hz")
        for amp in all_amps:
            cells = []
            for f in freqs:
                key = (atype, f, amp)
                cells.append(f"{rates[key]:7.1f}" if key in rates else "      -")
            print(f"  {amp:7.2f} |" + "".join(cells))

    if args.out:
        with open(args.out, "w") as fh:
            fh.write("afferent,freq_hz,amplitude_um,predicted_ips\n")
            for (atype, f, a), r in sorted(rates.items()):
                fh.write(f"{atype},{f!r},{a!r},{r!r}\n")
        print(f"\nwrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
