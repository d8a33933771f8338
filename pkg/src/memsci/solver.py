"""Selected-CI driver: subspace eigensolve, amplitude estimates, top-K, energy.

One iteration runs the three-stage pipeline of :mod:`memsci.memexec`:

1. generate the coupled records of every configuration in ``S`` and keep the
   locally unique targets; the full record stream is spilled.
2. after the global de-duplication barrier, estimate an amplitude for every
   unique configuration and keep a running top-K of those outside ``S``.
3. stream the spilled records back and accumulate the energy of ``S``
   through a just-in-time reverse index.

The selected candidates are merged into ``S`` (nothing is ever evicted) and the
subspace eigenproblem is solved again.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np
import scipy.sparse as sp

from .conf import (
    WORDS,
    Configuration,
    OrbitalSpace,
    occupancy,
    order_keys,
    reference_config,
    searchsorted,
    sort_unique,
    to_words,
)
from .distdedup import DEFAULT_SAMPLES, run_distributed_dedup
from .genkernel import RECORD_BYTES, generate_coupled, local_unique
from .hamiltonian import PAD, ExcitationTables, IntegralStore, build_tables, pair_index, table_footprint
from .memexec import (
    BudgetInfeasible,
    MemoryBudget,
    RankWork,
    ResidentTracker,
    SpillStore,
    Stage,
    StageTrace,
    jit_reverse_index,
    run_pipeline,
)

DENSE_MAX = 2000
DENOM_CLAMP = 1e-8
CONSECUTIVE = 3


class DavidsonError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"Davidson did not converge: residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


# -- selected space ---------------------------------------------------------

@dataclass
class SelectedSpace:
    """Sorted unique configurations (the set ``S``) and a generation stamp."""

    words: np.ndarray
    m: int
    generation: int = 0

    @classmethod
    def initial(cls, space: OrbitalSpace) -> "SelectedSpace":
        return cls(to_words([reference_config(space)]), space.m)

    @classmethod
    def from_configs(cls, configs, m: int, generation: int = 0) -> "SelectedSpace":
        return cls(sort_unique(to_words(list(configs))), m, generation)

    def __len__(self) -> int:
        return len(self.words)

    def locate(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(index, found)`` of each query row in ``S``."""
        query = np.asarray(query, dtype=np.uint64).reshape(-1, WORDS)
        idx = searchsorted(self.words, query)
        found = idx < len(self.words)
        found[found] = (self.words[idx[found]] == query[found]).all(axis=1)
        return idx, found

    def merged(self, extra: np.ndarray) -> "SelectedSpace":
        words = sort_unique(np.concatenate([self.words, np.asarray(extra, np.uint64).reshape(-1, WORDS)]))
        return SelectedSpace(words, self.m, self.generation + 1)


def diagonal_elements(words: np.ndarray, ints: IntegralStore) -> np.ndarray:
    """``H_jj`` per row; each row is reduced on its own so batching is irrelevant."""
    words = np.asarray(words, dtype=np.uint64).reshape(-1, WORDS)
    out = np.empty(len(words))
    hd = np.diag(ints.h_spin)
    pd = ints.pair_diagonal
    for lo in range(0, len(words), 4096):
        occ = occupancy(words[lo : lo + 4096], ints.m)
        n = int(occ[0].sum()) if len(occ) else 0
        orbs = np.nonzero(occ)[1].reshape(len(occ), n)
        one = hd[orbs].sum(axis=1)
        two = pd[orbs[:, :, None], orbs[:, None, :]].reshape(len(occ), n * n).sum(axis=1)
        out[lo : lo + 4096] = one + 0.5 * two + ints.e_core
    return out


def max_records_per_source(words: np.ndarray, tables: ExcitationTables) -> int:
    """Upper bound on coupled records any row of ``words`` can emit."""
    words = np.asarray(words, dtype=np.uint64).reshape(-1, WORDS)
    if len(words) == 0:
        return 0
    m = tables.m
    s_sizes = (tables.singles_target != PAD).sum(axis=1)
    d_sizes = (tables.doubles_target[..., 0] != PAD).sum(axis=1)
    best = 0
    for lo in range(0, len(words), 4096):
        occ = occupancy(words[lo : lo + 4096], m)
        n = int(occ[0].sum())
        orbs = np.nonzero(occ)[1].reshape(len(occ), n)
        i, j = np.triu_indices(n, 1)
        per = s_sizes[orbs].sum(axis=1) + d_sizes[pair_index(orbs[:, i], orbs[:, j], m)].sum(axis=1)
        best = max(best, int(per.max()))
    return best


# -- subspace eigensolver ---------------------------------------------------

def subspace_hamiltonian(S: SelectedSpace, ints: IntegralStore, tables: ExcitationTables, space: OrbitalSpace):
    recs = generate_coupled(S.words, tables, ints, space, eps=0.0)
    idx, found = S.locate(recs.targets)
    n = len(S)
    diag = diagonal_elements(S.words, ints)
    rows = np.concatenate([np.arange(n), recs.source_idx[found]])
    cols = np.concatenate([np.arange(n), idx[found]])
    vals = np.concatenate([diag, recs.elements[found]])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n)), diag


def davidson(
    H,
    diag: np.ndarray,
    x0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 200,
    max_space: int = 48,
) -> tuple[float, np.ndarray, int]:
    """Lowest eigenpair of symmetric ``H`` with a diagonal preconditioner."""
    n = len(diag)
    x = np.asarray(x0, dtype=float)
    x = x / np.linalg.norm(x)
    V = x[:, None]
    AV = (H @ x)[:, None]
    residual = math.inf
    for it in range(1, max_iter + 1):
        T = V.T @ AV
        w, s = np.linalg.eigh(0.5 * (T + T.T))
        theta, y = w[0], s[:, 0]
        x = V @ y
        Ax = AV @ y
        r = Ax - theta * x
        residual = float(np.linalg.norm(r))
        if residual < tol:
            return float(theta), x / np.linalg.norm(x), it
        denom = diag - theta
        small = np.abs(denom) < DENOM_CLAMP
        denom[small] = np.where(denom[small] < 0, -DENOM_CLAMP, DENOM_CLAMP)
        t = r / denom
        if V.shape[1] >= max_space:
            V, AV = x[:, None] / np.linalg.norm(x), Ax[:, None] / np.linalg.norm(x)
        for _ in range(2):
            t -= V @ (V.T @ t)
        norm = np.linalg.norm(t)
        if norm < 1e-14 or V.shape[1] >= n:
            # correction already in the span; fall back to the raw residual
            t = r - V @ (V.T @ r)
            norm = np.linalg.norm(t)
            if norm < 1e-14:
                return float(theta), x / np.linalg.norm(x), it
        t /= norm
        V = np.column_stack([V, t])
        AV = np.column_stack([AV, H @ t])
    raise DavidsonError(residual, max_iter)


def _fix_sign(psi: np.ndarray, ref_index: int) -> np.ndarray:
    pivot = psi[ref_index]
    if pivot == 0.0:
        nz = np.flatnonzero(psi)
        pivot = psi[nz[0]] if len(nz) else 1.0
    return -psi if pivot < 0 else psi


def subspace_eigensolve(
    S: SelectedSpace,
    ints: IntegralStore,
    tables: ExcitationTables,
    space: OrbitalSpace,
    guess: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Lowest eigenpair of ``H`` restricted to ``S``; ``psi`` normalized, reference >= 0."""
    if len(S) == 0:
        raise ValueError("empty selected space")
    H, diag = subspace_hamiltonian(S, ints, tables, space)
    if len(S) <= DENSE_MAX:
        w, v = np.linalg.eigh(H.toarray())
        e, psi = float(w[0]), v[:, 0]
    else:
        if guess is None or not np.any(guess):
            guess = np.zeros(len(S))
            guess[int(np.argmin(diag))] = 1.0
        e, psi, _ = davidson(H, diag, guess)
    ref_idx, found = S.locate(to_words([reference_config(space)]))
    psi = _fix_sign(psi / np.linalg.norm(psi), int(ref_idx[0]) if found[0] else 0)
    return e, psi


# -- amplitudes and top-K ---------------------------------------------------

class AmplitudeOracle(Protocol):
    def __call__(self, words: np.ndarray, hold: Callable[[int], None] | None = None) -> np.ndarray: ...


@dataclass
class PerturbativeAmplitudes:
    """Eigenvector entries on ``S``; first-order estimates elsewhere."""

    S: SelectedSpace
    psi: np.ndarray
    energy: float
    ints: IntegralStore
    tables: ExcitationTables
    space: OrbitalSpace

    def __call__(self, words: np.ndarray, hold=None) -> np.ndarray:
        words = np.asarray(words, dtype=np.uint64).reshape(-1, WORDS)
        out = np.zeros(len(words))
        idx, inside = self.S.locate(words)
        out[inside] = self.psi[idx[inside]]
        rest = np.flatnonzero(~inside)
        if len(rest) == 0:
            return out
        recs = generate_coupled(words[rest], self.tables, self.ints, self.space, eps=0.0)
        if hold is not None:
            hold(recs.nbytes)
        sidx, found = self.S.locate(recs.targets)
        contrib = recs.elements[found] * self.psi[sidx[found]]
        numer = np.bincount(recs.source_idx[found], weights=contrib, minlength=len(rest))
        out[rest] = numer / clamp_denominator(self.energy - diagonal_elements(words[rest], self.ints))
        return out


def clamp_denominator(d: np.ndarray) -> np.ndarray:
    d = np.array(d, dtype=float)
    small = np.abs(d) < DENOM_CLAMP
    d[small] = np.where(d[small] < 0, -DENOM_CLAMP, DENOM_CLAMP)
    return d


def estimate_amplitudes(unique, S: SelectedSpace, psi_S, E, ints, tables, space) -> np.ndarray:
    words = unique if isinstance(unique, np.ndarray) else to_words(unique)
    return PerturbativeAmplitudes(S, np.asarray(psi_S, float), E, ints, tables, space)(words)


@dataclass
class TopKState:
    capacity: int
    magnitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    words: np.ndarray = field(default_factory=lambda: np.zeros((0, WORDS), np.uint64))
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.words)

    @property
    def threshold(self) -> float:
        return float(self.magnitudes.min()) if len(self) == self.capacity and len(self) else 0.0

    def configs(self, m: int) -> list[Configuration]:
        return [Configuration.from_words(w, m) for w in self.words.tolist()]


def topk_update(state: TopKState, words: np.ndarray, psi: np.ndarray, exclude: SelectedSpace | None = None) -> TopKState:
    """Keep the ``capacity`` largest ``|psi|``; ties go to the smaller configuration."""
    words = np.asarray(words, dtype=np.uint64).reshape(-1, WORDS)
    psi = np.asarray(psi, dtype=float)
    if exclude is not None and len(words):
        _, inside = exclude.locate(words)
        words, psi = words[~inside], psi[~inside]
    all_words = np.concatenate([state.words, words])
    all_psi = np.concatenate([state.amplitudes, psi])
    mags = np.abs(all_psi)
    order = np.lexsort((order_keys(all_words), -mags))[: state.capacity]
    return TopKState(state.capacity, mags[order], all_words[order], all_psi[order])


def merge_topk(states: list[TopKState], capacity: int) -> TopKState:
    merged = TopKState(capacity)
    for st in states:
        merged = topk_update(merged, st.words, st.amplitudes)
    return merged


# -- energy -----------------------------------------------------------------

def energy_contributions(recs, psi_src: np.ndarray, psi_target: np.ndarray, idx: np.ndarray) -> float:
    """Off-diagonal ``sum psi_i H_ij psi_j`` for one batch, in record order."""
    return math.fsum((psi_src[recs.source_idx] * recs.elements * psi_target[idx]).tolist())


def evaluate_energy(records, unique_sorted: np.ndarray, psi_unique: np.ndarray, S: SelectedSpace, psi_S: np.ndarray, ints) -> float:
    """Rayleigh quotient of ``psi_S`` from a coupled record stream (one batch)."""
    idx = jit_reverse_index(records.targets, unique_sorted)
    return finish_energy([energy_contributions(records, psi_S, psi_unique, idx)], S, psi_S, ints)


def finish_energy(partials: list[float], S: SelectedSpace, psi_S: np.ndarray, ints) -> float:
    diag = diagonal_elements(S.words, ints)
    num = math.fsum([math.fsum(partials), math.fsum((psi_S * psi_S * diag).tolist())])
    return num / math.fsum((psi_S * psi_S).tolist())


def variational_amplitudes(unique_sorted: np.ndarray, S: SelectedSpace, psi_S: np.ndarray) -> np.ndarray:
    """``psi`` over the unique set with everything outside ``S`` set to zero."""
    out = np.zeros(len(unique_sorted))
    idx, found = S.locate(unique_sorted)
    out[found] = psi_S[idx[found]]
    return out


# -- driver -----------------------------------------------------------------

@dataclass
class SolveConfig:
    topk: int = 10
    eps_gen: float = 0.0
    eps_table: float = 0.0
    ranks: int = 1
    samples: int = DEFAULT_SAMPLES
    budget_bytes: float = math.inf
    max_iters: int = 20
    tol: float = 1e-8
    threads: int = 1
    chunk: int = 64
    overlap: bool = True
    spill_dir: str | None = None

    def __post_init__(self):
        if self.topk < 1:
            raise ValueError("topk must be >= 1")
        if self.ranks < 1:
            raise ValueError("ranks must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.eps_gen < 0:
            raise ValueError("eps_gen must be >= 0")
        if not self.tol >= 0:
            raise ValueError("tol must be >= 0")


@dataclass
class EnergyReport:
    iteration: int
    energy: float
    n_selected: int
    unique: int
    generated: int
    redundancy: float
    delta: float
    pipeline_energy: float
    unique_sha256: str

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SolveResult:
    reports: list[EnergyReport]
    verdict: str
    reference_energy: float
    selected: SelectedSpace
    psi: np.ndarray
    peak_bytes: int
    budget_bytes: float
    trace: StageTrace
    unique_sets: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def energy(self) -> float:
        return self.reports[-1].energy if self.reports else self.reference_energy

    @property
    def energies(self) -> list[float]:
        return [r.energy for r in self.reports]


def _rank_bounds(n: int, ranks: int) -> list[tuple[int, int]]:
    edges = [r * n // ranks for r in range(ranks + 1)]
    return list(zip(edges[:-1], edges[1:]))


@dataclass
class _IterationOutput:
    unique: np.ndarray
    generated: int
    pipeline_energy: float
    candidates: TopKState


class _Engine:
    def __init__(self, ints, space, tables, cfg: SolveConfig, oracle_factory):
        self.ints, self.space, self.tables, self.cfg = ints, space, tables, cfg
        self.oracle_factory = oracle_factory
        self.budget = MemoryBudget(cfg.budget_bytes)
        self.trackers = [ResidentTracker(cfg.budget_bytes) for _ in range(cfg.ranks)]
        self.trace = StageTrace(budget_bytes=cfg.budget_bytes)
        self.table_bytes = table_footprint(tables)

    def _hold(self, tracker: ResidentTracker, what: str):
        def hold(n: int):
            tracker.free(tracker.alloc(n, what))

        return hold

    def iterate(self, S: SelectedSpace, psi: np.ndarray, energy: float, store: SpillStore) -> _IterationOutput:
        cfg, R = self.cfg, self.cfg.ranks
        tag = f"g{S.generation}"
        s_bounds = _rank_bounds(len(S), R)
        runs: list[list[np.ndarray]] = [[] for _ in range(R)]
        generated = [0] * R
        reserved = self.table_bytes + len(S) * (8 * WORDS + 8)
        oracle = self.oracle_factory(S, psi, energy, self.ints, self.tables, self.space)
        state: dict = {}

        def stage1():
            item = 8 * WORDS + (RECORD_BYTES + 8 * WORDS) * max_records_per_source(S.words, self.tables)
            works = []
            for r, (base, stop) in enumerate(s_bounds):
                def load(lo, hi, base=base):
                    return (base + lo, S.words[base + lo : base + hi].copy())

                def compute(i, data):
                    start, words = data
                    recs = generate_coupled(
                        words, self.tables, self.ints, self.space,
                        eps=cfg.eps_gen, chunk=cfg.chunk, workers=cfg.threads, offset=start,
                    )
                    return local_unique(recs)

                def writeback(i, data, result, r=r):
                    uniq, recs = result
                    store.append(f"{tag}/rec/{r}", recs)
                    runs[r].append(uniq)
                    generated[r] += len(recs)

                works.append(RankWork(stop - base, item, load, compute, writeback, reserved))
            return works

        def barrier1(trackers):
            buffers = [np.concatenate(rr) if rr else np.zeros((0, WORDS), np.uint64) for rr in runs]
            result = run_distributed_dedup(buffers, cfg.samples)
            for r, tracker in enumerate(trackers):
                need = reserved + buffers[r].nbytes + result.slices[r].nbytes
                if need > self.budget.budget_bytes:
                    raise BudgetInfeasible(
                        f"budget infeasible: rank {r} dedup working set {need} B exceeds {self.budget.budget_bytes} B"
                    )
                tracker.free(tracker.alloc(need, "dedup barrier"))
            state["slices"] = result.slices

        def stage2():
            slices = state["slices"]
            state["amps"] = [[] for _ in range(R)]
            state["topk"] = [TopKState(cfg.topk) for _ in range(R)]
            works = []
            for r, sl in enumerate(slices):
                item = 8 * WORDS + 8 + RECORD_BYTES * max_records_per_source(sl, self.tables)
                hold = self._hold(self.trackers[r], "amplitude scratch")

                def load(lo, hi, sl=sl):
                    return sl[lo:hi].copy()

                def compute(i, words, hold=hold):
                    return oracle(words, hold)

                def writeback(i, words, amps, r=r):
                    state["amps"][r].append(amps)
                    state["topk"][r] = topk_update(state["topk"][r], words, amps, exclude=S)

                works.append(RankWork(len(sl), item, load, compute, writeback, reserved + cfg.topk * 32))
            return works

        def barrier2(trackers):
            unique = np.concatenate(state["slices"]) if R > 1 else state["slices"][0]
            state["unique"] = unique
            state["psi_var"] = variational_amplitudes(unique, S, psi)
            state["candidates"] = merge_topk(state["topk"], cfg.topk)
            state["partials"] = [[] for _ in range(R)]

        def stage3():
            works = []
            for r in range(R):
                stream = f"{tag}/rec/{r}"

                def load(lo, hi, stream=stream):
                    return store.read_range(stream, lo, hi)

                def compute(i, recs):
                    idx = jit_reverse_index(recs.targets, state["unique"])
                    return energy_contributions(recs, psi, state["psi_var"], idx)

                def writeback(i, recs, partial, r=r):
                    state["partials"][r].append(partial)

                works.append(RankWork(store.count(stream), RECORD_BYTES + 16, load, compute, writeback, reserved))
            return works

        trace = run_pipeline(
            [Stage("generate", stage1, barrier1), Stage("amplitudes", stage2, barrier2), Stage("energy", stage3)],
            self.budget, R, cfg.overlap, self.trackers,
        )
        self.trace.merge(trace)
        store.drop(tag)
        partials = [p for rank in state["partials"] for p in rank]
        return _IterationOutput(
            state["unique"], sum(generated), finish_energy(partials, S, psi, self.ints), state["candidates"]
        )


def sci_iterate(
    ints: IntegralStore,
    space: OrbitalSpace,
    cfg: SolveConfig | None = None,
    tables: ExcitationTables | None = None,
    oracle_factory=PerturbativeAmplitudes,
    keep_unique: bool = False,
) -> SolveResult:
    """Grow ``S`` from the reference until the energy settles."""
    cfg = cfg or SolveConfig()
    tables = tables or build_tables(ints, space, cfg.eps_table)
    engine = _Engine(ints, space, tables, cfg, oracle_factory)
    store = SpillStore(cfg.spill_dir)

    S = SelectedSpace.initial(space)
    energy, psi = subspace_eigensolve(S, ints, tables, space)
    reference_energy = energy
    reports: list[EnergyReport] = []
    unique_sets: list[np.ndarray] = []
    quiet = 0
    verdict = "max_iters"
    for it in range(1, cfg.max_iters + 1):
        out = engine.iterate(S, psi, energy, store)
        if keep_unique:
            unique_sets.append(out.unique)
        grown = S.merged(out.candidates.words)
        added = len(grown) - len(S)
        if added:
            guess = np.zeros(len(grown))
            idx, _ = grown.locate(S.words)
            guess[idx] = psi
            new_energy, new_psi = subspace_eigensolve(grown, ints, tables, space, guess)
        else:
            new_energy, new_psi = energy, psi
        delta = new_energy - energy
        redundancy = 1.0 - len(out.unique) / out.generated if out.generated else 0.0
        reports.append(
            EnergyReport(
                iteration=it,
                energy=new_energy,
                n_selected=len(grown),
                unique=len(out.unique),
                generated=out.generated,
                redundancy=redundancy,
                delta=delta,
                pipeline_energy=out.pipeline_energy,
                unique_sha256=hashlib.sha256(np.ascontiguousarray(out.unique).tobytes()).hexdigest(),
            )
        )
        S, psi, energy = grown, new_psi, new_energy
        if math.isinf(cfg.tol):
            verdict = "single_pass"
            break
        if added == 0:
            verdict = "saturated"
            break
        quiet = quiet + 1 if abs(delta) < cfg.tol else 0
        if quiet >= CONSECUTIVE:
            verdict = "converged"
            break
    peak = max(t.peak for t in engine.trackers)
    engine.trace.peak_bytes = peak
    return SolveResult(reports, verdict, reference_energy, S, psi, peak, cfg.budget_bytes, engine.trace, unique_sets)


# -- weak-scaling generation sweep ------------------------------------------

def sources_by_excitation(space: OrbitalSpace, count: int | None = None) -> np.ndarray:
    """Sector configurations ordered by excitation level from the reference."""
    from .conf import enumerate_sector

    sector = enumerate_sector(space, space.n_alpha)
    ref = occupancy(to_words([reference_config(space)]), space.m)
    level = (occupancy(sector, space.m) != ref).sum(axis=1) // 2
    order = np.lexsort((order_keys(sector), level))
    return sector[order][:count]


@dataclass
class ScalingPoint:
    ranks: int
    sources: int
    generated: int
    unique: int
    unique_ratio: float
    max_min_ratio: float | None
    cv: float

    def to_json(self) -> dict:
        return asdict(self)


def weak_scaling(
    ints: IntegralStore,
    space: OrbitalSpace,
    tables: ExcitationTables,
    per_rank: int,
    ranks_list,
    eps: float = 0.0,
    threads: int = 1,
    samples: int = DEFAULT_SAMPLES,
) -> list[ScalingPoint]:
    """Fixed sources per rank; generate, dedup, and report unique/generated."""
    pool = sources_by_excitation(space, per_rank * max(ranks_list))
    points = []
    for R in ranks_list:
        if per_rank * R > len(pool):
            raise ValueError(f"sector holds {len(pool)} configurations, {per_rank * R} requested")
        buffers, generated = [], 0
        for r in range(R):
            recs = generate_coupled(pool[r * per_rank : (r + 1) * per_rank], tables, ints, space, eps=eps, workers=threads)
            generated += len(recs)
            buffers.append(local_unique(recs)[0])
        result = run_distributed_dedup(buffers, samples)
        unique = sum(len(s) for s in result.slices)
        metrics = result.metrics.to_json()
        points.append(
            ScalingPoint(R, per_rank * R, generated, unique, unique / generated if generated else 0.0,
                         metrics["max_min_ratio"], metrics["cv"])
        )
    return points
