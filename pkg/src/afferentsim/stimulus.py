"""Indenter displacement traces: sinusoids, diharmonics, band-pass noise.

Three bundled protocols ship as machine-readable stimulus banks:

* ``appendixA`` — 37 sinusoids (12 at 20 Hz, 10 at 50 Hz, 9 at 100 Hz,
  6 at 300 Hz) used for parameter fitting,
* ``appendixB`` — 20 diharmonics (four frequency blocks of five amplitude
  rows),
* ``appendixC`` — 25 band-pass noise stimuli (five bands, five RMS levels).

All generators are pure functions of their parameters (plus seed for noise),
so protocol runs are fully deterministic.  Displacements are in mm, time in
ms, dt defaults to 0.5 ms (Nyquist 1 kHz).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .errors import ValidationError

DEFAULT_DT_MS = 0.5

# Rate analysis windows: discard the first 100 ms (filter/start transients),
# then count spikes over 245 ms at 20 Hz and 100 ms at higher frequencies.
DISCARD_MS = 100.0
WINDOW_20HZ_MS = 245.0
WINDOW_FAST_MS = 100.0

# Sinusoid bank: frequency -> amplitudes (um).
SINUSOID_TABLE: dict[float, tuple[float, ...]] = {
    20.0: (6.71, 9.32, 12.50, 18.00, 25.000, 34.74, 48.27, 67.07, 93.19,
           129.49, 179.92, 250.00),
    50.0: (7.19, 10.66, 15.81, 23.46, 34.80, 51.62, 76.58, 113.60, 168.52,
           250.00),
    100.0: (6.52, 10.00, 15.34, 23.54, 36.11, 55.39, 85.98, 130.37, 200.00),
    300.0: (4.59, 7.41, 11.94, 19.24, 31.02, 50.00),
}

# Diharmonic bank: (f1, f2) -> list of (a1, a2) in um.
DIHARMONIC_TABLE: dict[tuple[float, float], tuple[tuple[float, float], ...]] = {
    (10.0, 50.0): ((2.00, 2.00), (5.62, 5.62), (15.81, 15.81), (44.46, 44.46),
                   (125.00, 125.00)),
    (10.0, 100.0): ((2.00, 2.00), (5.62, 5.32), (15.81, 14.14), (44.46, 37.61),
                    (125.00, 100.00)),
    (50.0, 250.0): ((2.00, 1.00), (5.62, 2.48), (15.81, 6.12), (44.46, 15.15),
                    (125.00, 37.50)),
    (50.0, 500.0): ((2.00, 0.25), (5.62, 0.74), (15.81, 2.17), (44.46, 6.37),
                    (125.00, 18.75)),
}

# Noise bank: (lo, hi) -> RMS levels in um.
NOISE_TABLE: dict[tuple[float, float], tuple[float, ...]] = {
    (5.0, 25.0): (0.50, 1.00, 5.00, 10.00, 50.00),
    (5.0, 100.0): (0.50, 1.00, 5.00, 10.00, 50.00),
    (25.0, 250.0): (0.25, 1.00, 5.00, 10.00, 20.00),
    (25.0, 500.0): (0.25, 1.00, 5.00, 10.00, 20.00),
    (50.0, 500.0): (0.13, 0.50, 1.00, 5.00, 10.00),
}


def _nyquist_hz(dt_ms: float) -> float:
    return 1000.0 / (2.0 * dt_ms)


def _n_samples(duration_ms: float, dt_ms: float) -> int:
    if not duration_ms > 0:
        raise ValidationError(f"duration_ms must be > 0, got {duration_ms}")
    if not dt_ms > 0:
        raise ValidationError(f"dt_ms must be > 0, got {dt_ms}")
    return int(round(duration_ms / dt_ms)) + 1


def sinusoid(
    freq_hz: float, amplitude_um: float, duration_ms: float, dt_ms: float = DEFAULT_DT_MS
) -> np.ndarray:
    """s[k] = A sin(2 pi f k dt), in mm; starts at phase 0."""
    if not freq_hz < _nyquist_hz(dt_ms):
        raise ValidationError(
            f"freq_hz={freq_hz} violates Nyquist ({_nyquist_hz(dt_ms)} Hz at dt={dt_ms} ms)"
        )
    if amplitude_um < 0:
        raise ValidationError(f"amplitude_um must be >= 0, got {amplitude_um}")
    n = _n_samples(duration_ms, dt_ms)
    t_s = np.arange(n) * (dt_ms / 1000.0)
    return (amplitude_um / 1000.0) * np.sin(2.0 * np.pi * freq_hz * t_s)


def diharmonic(
    f1_hz: float, a1_um: float, f2_hz: float, a2_um: float,
    duration_ms: float, dt_ms: float = DEFAULT_DT_MS,
) -> np.ndarray:
    """Sum of two sinusoids, both starting at phase 0."""
    return sinusoid(f1_hz, a1_um, duration_ms, dt_ms) + sinusoid(
        f2_hz, a2_um, duration_ms, dt_ms
    )


def bandpass_noise(
    lo_hz: float, hi_hz: float, rms_um: float, duration_ms: float,
    dt_ms: float = DEFAULT_DT_MS, seed: int = 0, order: int = 4,
) -> np.ndarray:
    """Seeded Gaussian noise, zero-phase band-pass filtered, exact-RMS scaled.

    The band-pass is an order-`order` Butterworth applied forward-backward
    (zero phase, so no spurious transients enter the downstream derivative
    filters); after filtering the mean is removed and the trace rescaled so
    its sample RMS equals rms_um exactly.
    """
    nyq = _nyquist_hz(dt_ms)
    if not 0.0 < lo_hz < hi_hz < nyq:
        raise ValidationError(
            f"need 0 < lo < hi < Nyquist ({nyq} Hz): got ({lo_hz}, {hi_hz})"
        )
    if not rms_um > 0:
        raise ValidationError(f"rms_um must be > 0, got {rms_um}")
    n = _n_samples(duration_ms, dt_ms)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(n)
    sos = butter(order, [lo_hz / nyq, hi_hz / nyq], btype="bandpass", output="sos")
    shaped = sosfiltfilt(sos, raw)
    shaped = shaped - shaped.mean()
    rms = np.sqrt(np.mean(shaped**2))
    if rms == 0.0:
        raise ValidationError("filtered noise degenerated to zero; widen the band")
    return (rms_um / 1000.0) * shaped / rms


# --------------------------------------------------------------------------
# stimulus specs and protocols


@dataclass(frozen=True)
class StimulusSpec:
    """One protocol entry; generate() renders the displacement trace."""

    stimulus_id: str
    kind: str  # sinusoid | diharmonic | bandpass_noise
    duration_ms: float
    dt_ms: float
    discard_ms: float
    window_ms: float
    freq_hz: float | None = None
    amplitude_um: float | None = None
    freq2_hz: float | None = None
    amplitude2_um: float | None = None
    lo_hz: float | None = None
    hi_hz: float | None = None
    rms_um: float | None = None
    seed: int | None = None

    def validate(self) -> None:
        if self.kind not in ("sinusoid", "diharmonic", "bandpass_noise"):
            raise ValidationError(f"{self.stimulus_id}: unknown kind {self.kind!r}")
        if not self.duration_ms > 0 or not self.dt_ms > 0:
            raise ValidationError(f"{self.stimulus_id}: non-positive duration or dt")
        if self.discard_ms < 0 or self.window_ms <= 0:
            raise ValidationError(f"{self.stimulus_id}: bad analysis window")
        if self.discard_ms + self.window_ms > self.duration_ms + 1e-9:
            raise ValidationError(
                f"{self.stimulus_id}: discard+window exceeds duration"
            )
        need = {
            "sinusoid": ("freq_hz", "amplitude_um"),
            "diharmonic": ("freq_hz", "amplitude_um", "freq2_hz", "amplitude2_um"),
            "bandpass_noise": ("lo_hz", "hi_hz", "rms_um", "seed"),
        }[self.kind]
        for fieldname in need:
            if getattr(self, fieldname) is None:
                raise ValidationError(f"{self.stimulus_id}: missing {fieldname}")
        if self.kind == "bandpass_noise" and not self.lo_hz < self.hi_hz:
            raise ValidationError(
                f"{self.stimulus_id}: lo_hz must be below hi_hz"
            )

    def generate(self) -> np.ndarray:
        self.validate()
        if self.kind == "sinusoid":
            return sinusoid(self.freq_hz, self.amplitude_um, self.duration_ms, self.dt_ms)
        if self.kind == "diharmonic":
            return diharmonic(
                self.freq_hz, self.amplitude_um, self.freq2_hz, self.amplitude2_um,
                self.duration_ms, self.dt_ms,
            )
        return bandpass_noise(
            self.lo_hz, self.hi_hz, self.rms_um, self.duration_ms, self.dt_ms, self.seed
        )

    def content_key(self) -> str:
        """Canonical JSON of every generation-relevant field."""
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


def _window_for(freq_hz: float) -> tuple[float, float, float]:
    """(duration, discard, window) in ms for a sinusoid frequency."""
    if freq_hz == 20.0:
        window = WINDOW_20HZ_MS
    else:
        window = WINDOW_FAST_MS
    return DISCARD_MS + window, DISCARD_MS, window


def builtin_protocol(
    name: str, dt_ms: float = DEFAULT_DT_MS, base_seed: int = 0
) -> list[StimulusSpec]:
    """Render one of the bundled banks: appendixA, appendixB, appendixC."""
    specs: list[StimulusSpec] = []
    if name == "appendixA":
        for freq, amps in SINUSOID_TABLE.items():
            duration, discard, window = _window_for(freq)
            for amp in amps:
                specs.append(StimulusSpec(
                    stimulus_id=f"sin_{freq:03.0f}hz_{amp:06.2f}um",
                    kind="sinusoid", duration_ms=duration, dt_ms=dt_ms,
                    discard_ms=discard, window_ms=window,
                    freq_hz=freq, amplitude_um=amp,
                ))
    elif name == "appendixB":
        # The slowest component is 10 Hz; use the long analysis window so
        # at least two full cycles land inside it.
        duration = DISCARD_MS + WINDOW_20HZ_MS
        for (f1, f2), rows in DIHARMONIC_TABLE.items():
            for a1, a2 in rows:
                specs.append(StimulusSpec(
                    stimulus_id=(
                        f"dih_{f1:03.0f}hz_{a1:06.2f}um_{f2:03.0f}hz_{a2:06.2f}um"
                    ),
                    kind="diharmonic", duration_ms=duration, dt_ms=dt_ms,
                    discard_ms=DISCARD_MS, window_ms=WINDOW_20HZ_MS,
                    freq_hz=f1, amplitude_um=a1, freq2_hz=f2, amplitude2_um=a2,
                ))
    elif name == "appendixC":
        duration = DISCARD_MS + WINDOW_20HZ_MS
        row = 0
        for (lo, hi), levels in NOISE_TABLE.items():
            for rms in levels:
                specs.append(StimulusSpec(
                    stimulus_id=(
                        f"noise_{lo:03.0f}-{hi:03.0f}hz_rms{rms:05.2f}um_seed{base_seed + row}"
                    ),
                    kind="bandpass_noise", duration_ms=duration, dt_ms=dt_ms,
                    discard_ms=DISCARD_MS, window_ms=WINDOW_20HZ_MS,
                    lo_hz=lo, hi_hz=hi, rms_um=rms, seed=base_seed + row,
                ))
                row += 1
    else:
        raise ValidationError(
            f"unknown builtin protocol {name!r}; expected appendixA, appendixB or appendixC"
        )
    for s in specs:
        s.validate()
    return specs


def save_protocol(specs: list[StimulusSpec], path, name: str = "custom") -> None:
    payload = {
        "name": name,
        "stimuli": [
            {k: v for k, v in asdict(s).items() if v is not None} for s in specs
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_protocol(path) -> list[StimulusSpec]:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read protocol file {path}: {exc}") from exc
    if not isinstance(payload, dict) or "stimuli" not in payload:
        raise ValidationError(f"{path}: protocol file needs a 'stimuli' list")
    specs = []
    for i, rec in enumerate(payload["stimuli"]):
        try:
            spec = StimulusSpec(**rec)
        except TypeError as exc:
            raise ValidationError(f"{path}: stimulus #{i}: {exc}") from exc
        spec.validate()
        specs.append(spec)
    if not specs:
        raise ValidationError(f"{path}: protocol contains no stimuli")
    return specs


def trace_to_csv(spec: StimulusSpec, trace: np.ndarray, path, provenance=None) -> None:
    with open(path, "w") as fh:
        fh.write(f"# stimulus: {spec.stimulus_id}\n")
        if provenance:
            fh.write(f"# provenance: {provenance}\n")
        fh.write("t_ms,displacement_mm\n")
        for k, v in enumerate(trace):
            fh.write(f"{k * spec.dt_ms!r},{float(v)!r}\n")
