"""NSGA-II fitting of afferent parameters against observed firing rates.

The tunables per afferent type are (tau_m, saturation constants, alpha');
cell constants (threshold, rest/reset, refractory, filter widths) stay
fixed.  Saturation constants are searched in log10 space since plausible
values span decades.  Objectives are the per-frequency mean squared rate
errors over the stimulus bank, one objective per stimulus frequency
(20/50/100/300 Hz), all to be minimized.

The returned front is the rank-0 subset of the final population; the full
population is exported so a human can re-pick, but select_candidate applies
a deterministic rule (min objective sum, then min worst objective, then
lexicographic genes) so pipelines are reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .fem import StressTrace
from .neural import AfferentParams, count_spikes_in_window, default_afferent_params, filtered_inputs
from .stimulus import DISCARD_MS, WINDOW_20HZ_MS, WINDOW_FAST_MS

OBJECTIVE_FREQS = (20.0, 50.0, 100.0, 300.0)

# Search bounds: tau_m in ms, saturation constants as log10 of their
# physical value, alpha' in mV/ms.  Brackets hold every shipped default
# with about two orders of margin.
TAU_M_BOUNDS = (1.0, 2000.0)
LOG10_A_BOUNDS = (0.0, 6.0)
ALPHA_BOUNDS = (0.01, 100.0)

_SAT_FIELDS = {
    "SA": ("a1_pa", "a2_pa_per_ms"),
    "RA": ("a3_pa_per_ms",),
    "PC": ("a4_pa_per_ms2",),
}


def gene_names(afferent_type: str) -> tuple[str, ...]:
    sats = _SAT_FIELDS[afferent_type]
    return ("tau_m_ms",) + tuple(f"log10_{f}" for f in sats) + ("alpha_prime",)


def gene_bounds(afferent_type: str) -> tuple[np.ndarray, np.ndarray]:
    n_sat = len(_SAT_FIELDS[afferent_type])
    low = np.array([TAU_M_BOUNDS[0]] + [LOG10_A_BOUNDS[0]] * n_sat + [ALPHA_BOUNDS[0]])
    high = np.array([TAU_M_BOUNDS[1]] + [LOG10_A_BOUNDS[1]] * n_sat + [ALPHA_BOUNDS[1]])
    return low, high


def genes_to_params(afferent_type: str, genes: np.ndarray) -> AfferentParams:
    """Decode a search vector onto the fixed-constant template for the type."""
    sats = _SAT_FIELDS[afferent_type]
    if genes.shape != (len(sats) + 2,):
        raise ValidationError(
            f"{afferent_type} expects {len(sats) + 2} genes, got {genes.shape}"
        )
    template = default_afferent_params()[afferent_type]
    updates = {"tau_m_ms": float(genes[0]), "alpha_prime": float(genes[-1])}
    for i, name in enumerate(sats):
        updates[name] = float(10.0 ** genes[1 + i])
    p = dataclasses.replace(template, **updates)
    p.validate()
    return p


def params_to_genes(params: AfferentParams) -> np.ndarray:
    sats = params.saturation()
    return np.array([params.tau_m_ms] + [np.log10(a) for a in sats] + [params.alpha_prime])


# --------------------------------------------------------------------------
# observed data and objective evaluation


@dataclass(frozen=True)
class ObservedRateSet:
    afferent_type: str
    records: tuple[tuple[float, float, float], ...]  # (freq_hz, amplitude_um, rate_ips)

    def validate(self) -> None:
        if not self.records:
            raise ValidationError(f"no observed rates for {self.afferent_type}")
        seen = set()
        for f, a, r in self.records:
            if f not in OBJECTIVE_FREQS:
                raise ValidationError(
                    f"observed frequency {f} Hz outside {OBJECTIVE_FREQS}"
                )
            if r < 0:
                raise ValidationError(f"negative observed rate at ({f} Hz, {a} um)")
            if (f, a) in seen:
                raise ValidationError(f"duplicate observed condition ({f} Hz, {a} um)")
            seen.add((f, a))

    def content_hash(self) -> str:
        blob = json.dumps(
            [self.afferent_type] + [list(map(float, r)) for r in self.records],
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_csv(cls, path, afferent_type: str) -> "ObservedRateSet":
        """Read `afferent,freq_hz,amplitude_um,rate_ips` rows for one type."""
        records = []
        try:
            with open(path) as fh:
                lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
        except OSError as exc:
            raise ValidationError(f"cannot read observed rates {path}: {exc}") from exc
        header = "afferent,freq_hz,amplitude_um,rate_ips"
        if not lines or [c.strip() for c in lines[0].split(",")] != header.split(","):
            raise ValidationError(f"{path}: expected header {header}")
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 4:
                raise ValidationError(f"{path}: malformed row {ln!r}")
            if parts[0] == afferent_type:
                records.append((float(parts[1]), float(parts[2]), float(parts[3])))
        out = cls(afferent_type=afferent_type, records=tuple(records))
        out.validate()
        return out


def observed_rates_to_csv(sets: list[ObservedRateSet], path) -> None:
    with open(path, "w") as fh:
        fh.write("afferent,freq_hz,amplitude_um,rate_ips\n")
        for s in sets:
            for f, a, r in s.records:
                fh.write(f"{s.afferent_type},{f!r},{a!r},{r!r}\n")


def _window_ms(freq_hz: float) -> float:
    return WINDOW_20HZ_MS if freq_hz == 20.0 else WINDOW_FAST_MS


class RateEvaluator:
    """Maps a gene vector to the 4-vector of per-frequency squared rate errors.

    The filter chain does not depend on any tunable gene, so each stimulus is
    filtered once up front; per candidate only the saturating transform and
    the windowed spike count run.
    """

    def __init__(
        self,
        afferent_type: str,
        stress_bank: dict[tuple[float, float], StressTrace],
        observed: ObservedRateSet,
        discard_ms: float = DISCARD_MS,
        method: str = "euler",
    ):
        observed.validate()
        if observed.afferent_type != afferent_type:
            raise ValidationError("observed rates are for a different afferent type")
        missing = [key for key in ((f, a) for f, a, _ in observed.records)
                   if key not in stress_bank]
        if missing:
            raise ValidationError(
                "stress bank is missing observed conditions: "
                + ", ".join(f"({f} Hz, {a} um)" for f, a in sorted(missing))
            )
        self.afferent_type = afferent_type
        self.method = method
        template = default_afferent_params()[afferent_type]
        self._entries = []
        for f, a, rate in observed.records:
            trace = stress_bank[(f, a)]
            window = _window_ms(f)
            if discard_ms + window > trace.duration_ms + 1e-9:
                raise ValidationError(
                    f"stress trace for ({f} Hz, {a} um) is shorter than "
                    f"discard + window = {discard_ms + window} ms"
                )
            self._entries.append({
                "freq_idx": OBJECTIVE_FREQS.index(f),
                "features": filtered_inputs(template, trace.values, trace.dt_ms),
                "dt_ms": trace.dt_ms,
                "window_ms": window,
                "discard_ms": discard_ms,
                "observed": rate,
            })

    def __call__(self, genes: np.ndarray) -> np.ndarray:
        params = genes_to_params(self.afferent_type, np.asarray(genes, dtype=float))
        sums = np.zeros(len(OBJECTIVE_FREQS))
        counts = np.zeros(len(OBJECTIVE_FREQS), dtype=int)
        for entry in self._entries:
            err = _rate_for_entry(params, entry, self.method) - entry["observed"]
            sums[entry["freq_idx"]] += err * err
            counts[entry["freq_idx"]] += 1
        return sums / np.maximum(counts, 1)


def _rate_for_entry(params: AfferentParams, entry: dict, method: str) -> float:
    sats = params.saturation()
    drive = np.zeros_like(entry["features"][0])
    for feat, a in zip(entry["features"], sats):
        drive += feat / (a + feat)
    drive *= params.alpha_prime
    n = count_spikes_in_window(
        drive, params, entry["dt_ms"], entry["discard_ms"],
        entry["discard_ms"] + entry["window_ms"], method=method,
    )
    return n / (entry["window_ms"] / 1000.0)


def objectives(
    genes: np.ndarray,
    stress_bank: dict[tuple[float, float], StressTrace],
    observed: ObservedRateSet,
) -> np.ndarray:
    """One-shot evaluation; build a RateEvaluator directly for repeated use."""
    return RateEvaluator(observed.afferent_type, stress_bank, observed)(genes)


def predict_rates(
    params: AfferentParams,
    stress_bank: dict[tuple[float, float], StressTrace],
    discard_ms: float = DISCARD_MS,
    method: str = "euler",
) -> list[tuple[float, float, float]]:
    """(freq, amplitude, predicted ips) over the whole bank, sorted."""
    rows = []
    for (f, a), trace in sorted(stress_bank.items()):
        entry = {
            "features": filtered_inputs(params, trace.values, trace.dt_ms),
            "dt_ms": trace.dt_ms,
            "window_ms": _window_ms(f),
            "discard_ms": discard_ms,
        }
        rows.append((f, a, _rate_for_entry(params, entry, method)))
    return rows


# --------------------------------------------------------------------------
# NSGA-II machinery


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    """Minimization dominance: a no worse everywhere, better somewhere."""
    return bool(np.all(a <= b) and np.any(a < b))


def fast_non_dominated_sort(objs: np.ndarray) -> np.ndarray:
    """Rank array: 0 for the non-dominated set, 1 for the next layer, ..."""
    n = objs.shape[0]
    le = np.all(objs[:, None, :] <= objs[None, :, :], axis=2)
    lt = np.any(objs[:, None, :] < objs[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    n_dominators = dom.sum(axis=0)
    ranks = np.full(n, -1, dtype=int)
    current = 0
    remaining = np.ones(n, dtype=bool)
    while remaining.any():
        front = remaining & (n_dominators == 0)
        if not front.any():  # pragma: no cover - dominance is acyclic
            raise ValidationError("non-dominated sort failed to make progress")
        ranks[front] = current
        n_dominators = n_dominators - dom[front].sum(axis=0)
        n_dominators[front] = -1
        remaining &= ~front
        current += 1
    return ranks


def crowding_distance(objs: np.ndarray) -> np.ndarray:
    """Crowding of members of a single front (any shape (m, k), m >= 1)."""
    m, k = objs.shape
    dist = np.zeros(m)
    if m <= 2:
        dist[:] = np.inf
        return dist
    for j in range(k):
        order = np.argsort(objs[:, j], kind="stable")
        vals = objs[order, j]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = vals[-1] - vals[0]
        if span > 0:
            dist[order[1:-1]] += (vals[2:] - vals[:-2]) / span
    return dist


def _rank_and_crowd(objs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ranks = fast_non_dominated_sort(objs)
    crowd = np.empty(objs.shape[0])
    for r in range(ranks.max() + 1):
        idx = np.flatnonzero(ranks == r)
        crowd[idx] = crowding_distance(objs[idx])
    return ranks, crowd


def _tournament(rng, ranks, crowd) -> int:
    i, j = rng.integers(0, ranks.size, size=2)
    if ranks[i] != ranks[j]:
        return int(i if ranks[i] < ranks[j] else j)
    if crowd[i] != crowd[j]:
        return int(i if crowd[i] > crowd[j] else j)
    return int(min(i, j))


def _sbx_pair(p1, p2, low, high, eta, rng):
    c1, c2 = p1.copy(), p2.copy()
    for g in range(p1.size):
        if rng.random() > 0.5 or abs(p1[g] - p2[g]) < 1e-14:
            continue
        u = rng.random()
        if u <= 0.5:
            beta = (2.0 * u) ** (1.0 / (eta + 1.0))
        else:
            beta = (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0))
        y1 = 0.5 * ((1 + beta) * p1[g] + (1 - beta) * p2[g])
        y2 = 0.5 * ((1 - beta) * p1[g] + (1 + beta) * p2[g])
        c1[g] = min(max(y1, low[g]), high[g])
        c2[g] = min(max(y2, low[g]), high[g])
    return c1, c2


def _polynomial_mutation(x, low, high, eta, rate, rng):
    for g in range(x.size):
        if rng.random() >= rate:
            continue
        xl, xu = low[g], high[g]
        span = xu - xl
        u = rng.random()
        d1 = (x[g] - xl) / span
        d2 = (xu - x[g]) / span
        if u < 0.5:
            dq = (2 * u + (1 - 2 * u) * (1 - d1) ** (eta + 1)) ** (1 / (eta + 1)) - 1
        else:
            dq = 1 - (2 * (1 - u) + 2 * (u - 0.5) * (1 - d2) ** (eta + 1)) ** (1 / (eta + 1))
        x[g] = min(max(x[g] + dq * span, xl), xu)


def _n_threads() -> int:
    raw = os.environ.get("AFFERENTSIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _evaluate_batch(evaluate, genes: np.ndarray) -> np.ndarray:
    threads = _n_threads()
    if threads == 1:
        rows = [evaluate(genes[i]) for i in range(genes.shape[0])]
    else:
        # results keyed by index, so the outcome is order-invariant
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(evaluate, [genes[i] for i in range(genes.shape[0])]))
    out = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0])
        raise ValidationError(
            f"objective evaluation returned non-finite values for candidate "
            f"{genes[bad].tolist()}"
        )
    return out


@dataclass
class ParetoFront:
    gene_names: tuple[str, ...]
    genes: np.ndarray  # final population, (N, n_genes)
    objectives: np.ndarray  # (N, n_objectives)
    ranks: np.ndarray
    crowding: np.ndarray
    seed: int
    budget: int
    bounds_low: np.ndarray
    bounds_high: np.ndarray
    best_sum_history: list[float] = field(default_factory=list)

    def front_indices(self) -> np.ndarray:
        return np.flatnonzero(self.ranks == 0)


def nsga2(
    evaluate,
    bounds: tuple[np.ndarray, np.ndarray],
    budget: int,
    seed: int,
    population_size: int = 100,
    eta_crossover: float = 15.0,
    eta_mutation: float = 20.0,
    crossover_prob: float = 0.9,
    mutation_rate: float | None = None,
) -> ParetoFront:
    """Elitist NSGA-II; stops when the evaluation budget would be exceeded.

    Fully deterministic for a fixed seed: one generator drives all draws and
    every sort is stable.
    """
    low = np.asarray(bounds[0], dtype=float)
    high = np.asarray(bounds[1], dtype=float)
    if low.shape != high.shape or low.ndim != 1:
        raise ValidationError("bounds must be two equal-length 1-D arrays")
    if not np.all(np.isfinite(low)) or not np.all(np.isfinite(high)) or np.any(low >= high):
        raise ValidationError("bounds must be finite with low < high")
    if population_size < 2:
        raise ValidationError("population_size must be >= 2")
    if budget < population_size:
        raise ValidationError("budget must cover at least the initial population")
    n_genes = low.size
    if mutation_rate is None:
        mutation_rate = 1.0 / n_genes
    rng = np.random.default_rng(seed)

    pop = rng.uniform(low, high, size=(population_size, n_genes))
    objs = _evaluate_batch(evaluate, pop)
    evals = population_size
    ranks, crowd = _rank_and_crowd(objs)
    best = float(objs.sum(axis=1).min())
    history = [best]

    while evals + population_size <= budget:
        children = np.empty_like(pop)
        for i in range(0, population_size - 1, 2):
            a = _tournament(rng, ranks, crowd)
            b = _tournament(rng, ranks, crowd)
            if rng.random() < crossover_prob:
                c1, c2 = _sbx_pair(pop[a], pop[b], low, high, eta_crossover, rng)
            else:
                c1, c2 = pop[a].copy(), pop[b].copy()
            _polynomial_mutation(c1, low, high, eta_mutation, mutation_rate, rng)
            _polynomial_mutation(c2, low, high, eta_mutation, mutation_rate, rng)
            children[i], children[i + 1] = c1, c2
        if population_size % 2:
            a = _tournament(rng, ranks, crowd)
            c1 = pop[a].copy()
            _polynomial_mutation(c1, low, high, eta_mutation, mutation_rate, rng)
            children[-1] = c1
        child_objs = _evaluate_batch(evaluate, children)
        evals += population_size

        merged = np.vstack([pop, children])
        merged_objs = np.vstack([objs, child_objs])
        merged_ranks = fast_non_dominated_sort(merged_objs)
        chosen: list[int] = []
        for r in range(merged_ranks.max() + 1):
            idx = np.flatnonzero(merged_ranks == r)
            if len(chosen) + idx.size <= population_size:
                chosen.extend(idx.tolist())
            else:
                dist = crowding_distance(merged_objs[idx])
                order = np.argsort(-dist, kind="stable")
                need = population_size - len(chosen)
                chosen.extend(idx[order[:need]].tolist())
            if len(chosen) >= population_size:
                break
        pick = np.array(chosen[:population_size], dtype=int)
        pop = merged[pick].copy()
        objs = merged_objs[pick].copy()
        ranks, crowd = _rank_and_crowd(objs)
        best = min(best, float(objs.sum(axis=1).min()))
        history.append(best)

    if hasattr(evaluate, "afferent_type"):
        names = gene_names(evaluate.afferent_type)
    else:
        names = tuple(f"g{i}" for i in range(n_genes))
    return ParetoFront(
        gene_names=names,
        genes=pop, objectives=objs, ranks=ranks, crowding=crowd,
        seed=seed, budget=budget, bounds_low=low, bounds_high=high,
        best_sum_history=history,
    )


def select_candidate(front: ParetoFront, observed: ObservedRateSet | None = None) -> int:
    """Deterministic pick from the rank-0 set; returns an index into the front.

    Rule: minimal objective sum, then minimal worst single objective, then
    lexicographically smallest gene vector.  `observed` is accepted for
    signature parity but unused — the rule needs only the objectives.
    """
    idx = front.front_indices()
    if idx.size == 0:
        raise ValidationError("empty front")
    keys = [
        (
            float(front.objectives[i].sum()),
            float(front.objectives[i].max()),
            tuple(float(g) for g in front.genes[i]),
            int(i),
        )
        for i in idx
    ]
    return min(keys)[-1]


@dataclass
class FitOutcome:
    afferent_type: str
    selected: AfferentParams
    selected_objectives: np.ndarray
    front: ParetoFront
    observed: ObservedRateSet

    @property
    def objective_sum(self) -> float:
        return float(self.selected_objectives.sum())


def fit_afferent(
    afferent_type: str,
    stress_bank: dict[tuple[float, float], StressTrace],
    observed: ObservedRateSet,
    seed: int,
    budget: int = 10000,
    population_size: int = 100,
) -> FitOutcome:
    evaluator = RateEvaluator(afferent_type, stress_bank, observed)
    front = nsga2(evaluator, gene_bounds(afferent_type), budget, seed,
                  population_size=population_size)
    pick = select_candidate(front)
    return FitOutcome(
        afferent_type=afferent_type,
        selected=genes_to_params(afferent_type, front.genes[pick]),
        selected_objectives=front.objectives[pick].copy(),
        front=front,
        observed=observed,
    )


def recover_parameters(
    ground_truth: AfferentParams,
    stress_bank: dict[tuple[float, float], StressTrace],
    seed: int,
    budget: int = 10000,
    population_size: int = 100,
) -> FitOutcome:
    """Self-test: fit against rates synthesized from a known parameter set."""
    synthetic = ObservedRateSet(
        afferent_type=ground_truth.afferent_type,
        records=tuple(predict_rates(ground_truth, stress_bank)),
    )
    return fit_afferent(
        ground_truth.afferent_type, stress_bank, synthetic, seed,
        budget=budget, population_size=population_size,
    )


# --------------------------------------------------------------------------
# exports


def front_to_csv(front: ParetoFront, afferent_type: str, path, provenance=None) -> None:
    """Full final population, front first, decoded parameter columns."""
    sats = _SAT_FIELDS[afferent_type]
    param_cols = ("tau_m_ms",) + sats + ("alpha_prime",)
    order = sorted(
        range(front.genes.shape[0]),
        key=lambda i: (
            int(front.ranks[i]),
            float(front.objectives[i].sum()),
            tuple(float(g) for g in front.genes[i]),
        ),
    )
    with open(path, "w") as fh:
        if provenance:
            fh.write(f"# provenance: {provenance}\n")
        obj_cols = ",".join(f"objective_{int(f)}" for f in OBJECTIVE_FREQS)
        fh.write(f"rank,{obj_cols},{','.join(param_cols)}\n")
        for i in order:
            params = genes_to_params(afferent_type, front.genes[i])
            vals = [getattr(params, c) for c in param_cols]
            fh.write(
                f"{int(front.ranks[i])},"
                + ",".join(repr(float(v)) for v in front.objectives[i])
                + ","
                + ",".join(repr(float(v)) for v in vals)
                + "\n"
            )


def selected_to_json(outcome: FitOutcome, path, extra_provenance: dict | None = None) -> None:
    payload = {
        "afferent": outcome.afferent_type,
        "params": outcome.selected.to_dict(),
        "objectives": {
            f"objective_{int(f)}": float(v)
            for f, v in zip(OBJECTIVE_FREQS, outcome.selected_objectives)
        },
        "objective_sum": outcome.objective_sum,
        "provenance": {
            "seed": outcome.front.seed,
            "budget": outcome.front.budget,
            "population": int(outcome.front.genes.shape[0]),
            "bounds_low": [float(v) for v in outcome.front.bounds_low],
            "bounds_high": [float(v) for v in outcome.front.bounds_high],
            "observed_data_hash": outcome.observed.content_hash(),
            **(extra_provenance or {}),
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
