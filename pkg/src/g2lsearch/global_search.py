"""Genetic coarse search over the sparse dilation space.

One iteration: draw M/2 parent pairs with fitness-proportional probability,
swap a random contiguous segment between the two parents of each pair, mutate
each child with probability ``p_m`` (one random layer gets a fresh dilation
from the space), evaluate the children and keep the best M of parents and
children together.  Keeping survivors from the union makes the best fitness
non-decreasing.

Identical structures are evaluated once per run; evaluation must therefore be
deterministic in the structure (the evaluator derives its own seed from it).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (CheckpointError, ConfigError, DegenerateFitnessError, PopulationError,
                     ShapeError)
from .search_space import (DilationStructure, GlobalSearchSpace, build_global_space,
                           decode_structure, encode_structure, random_structure)

log = logging.getLogger(__name__)

Evaluator = Callable[[DilationStructure, int], float]
MapFn = Callable[[Callable, Iterable], Iterable]


@dataclass
class Candidate:
    structure: DilationStructure
    fitness: float | None = None

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None


@dataclass
class Population:
    candidates: list[Candidate]
    capacity: int

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    @property
    def fitness(self) -> np.ndarray:
        return np.array([c.fitness for c in self.candidates], dtype=np.float64)

    @property
    def best(self) -> Candidate:
        return max(self.candidates, key=lambda c: c.fitness)


@dataclass
class GlobalSearchConfig:
    iterations: int = 100
    population_size: int = 50
    mutation_prob: float = 0.2
    epochs: int = 5
    seed: int = 0
    space: GlobalSearchSpace = field(default_factory=lambda: build_global_space(2, 10))
    shape: tuple[int, ...] = (10, 10, 10, 10)

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if self.iterations < 1:
            raise ConfigError("global search needs at least one iteration")
        if self.population_size < 2:
            raise ConfigError("population size must be >= 2")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ConfigError("mutation probability must lie in [0, 1]")
        if self.epochs < 1:
            raise ConfigError("fitness evaluation needs at least one epoch")
        if not self.shape or min(self.shape) < 1:
            raise ConfigError(f"invalid structure shape {self.shape}")

    @property
    def offspring_per_iteration(self) -> int:
        return 2 * (self.population_size // 2)


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    best_fitness: float
    mean_fitness: float
    best_structure: DilationStructure


@dataclass
class GlobalSearchResult:
    population: Population
    history: list[HistoryRow]
    warnings: list[str]
    evaluations: int

    @property
    def best(self) -> Candidate:
        return self.population.candidates[0]


# ---------------------------------------------------------------------------
# operators


def selection_probabilities(pop: Population | Sequence[float]) -> np.ndarray:
    """Fitness-proportional crossover probabilities, in population order."""
    fit = pop.fitness if isinstance(pop, Population) else np.asarray(pop, dtype=np.float64)
    if fit.size == 0 or np.any(np.isnan(fit)):
        raise PopulationError("selection needs a non-empty, fully evaluated population")
    if np.any(fit < 0) or not np.all(np.isfinite(fit)):
        raise ConfigError("fitness values must be finite and non-negative")
    total = math.fsum(fit.tolist())
    if total == 0.0:
        raise DegenerateFitnessError("every candidate has fitness 0")
    return fit / total


def crossover(a: DilationStructure, b: DilationStructure, rng: np.random.Generator,
              anchors: tuple[int, int] | None = None):
    """Swap the flat-layer segment ``[i, j)`` between two parents.

    The anchors are two uniform draws from ``0..L`` (sorted) unless given.
    """
    if a.shape != b.shape:
        raise ShapeError(f"cannot cross structures of shapes {a.shape} and {b.shape}")
    L = a.num_layers
    if anchors is None:
        i, j = sorted(int(v) for v in rng.integers(0, L + 1, size=2))
    else:
        i, j = anchors
        if not 0 <= i <= j <= L:
            raise ShapeError(f"anchors {anchors} outside 0..{L}")
    fa, fb = list(a.flat), list(b.flat)
    fa[i:j], fb[i:j] = fb[i:j], fa[i:j]
    return DilationStructure.from_flat(fa, a.shape), DilationStructure.from_flat(fb, b.shape)


def mutate(s: DilationStructure, p_m: float, space: GlobalSearchSpace,
           rng: np.random.Generator) -> DilationStructure:
    """With probability ``p_m`` redraw one uniformly chosen layer from ``space``."""
    if not 0.0 <= p_m <= 1.0:
        raise ConfigError("mutation probability must lie in [0, 1]")
    if rng.random() >= p_m:
        return s
    layer = int(rng.integers(s.num_layers))
    value = space.dilations[int(rng.integers(len(space)))]
    return s.replace_flat(layer, value)


def select_top_m(candidates: Sequence[Candidate], M: int) -> Population:
    """The M fittest candidates, ties resolved by input order."""
    if len(candidates) < M:
        raise PopulationError(f"{len(candidates)} candidates cannot fill a population of {M}")
    if any(not c.evaluated for c in candidates):
        raise PopulationError("every candidate must be evaluated before selection")
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].fitness)
    return Population([candidates[i] for i in order[:M]], M)


# ---------------------------------------------------------------------------
# search loop


def _safe_evaluate(evaluate: Evaluator, epochs: int, structure: DilationStructure):
    try:
        value = float(evaluate(structure, epochs))
    except Exception as exc:  # noqa: BLE001 - any evaluator failure scores 0
        return 0.0, f"{encode_structure(structure)}: evaluation failed ({exc!r})"
    if not math.isfinite(value) or value < 0:
        return 0.0, f"{encode_structure(structure)}: invalid fitness {value!r}"
    return value, None


class _FitnessCache:
    """Evaluates each distinct structure once, in first-seen order."""

    def __init__(self, evaluate: Evaluator, epochs: int, map_fn: MapFn | None,
                 cache: dict[str, float] | None = None):
        self.evaluate = evaluate
        self.epochs = epochs
        self.map_fn = map_fn or map
        self.values: dict[str, float] = dict(cache or {})
        self.calls = 0
        self.warnings: list[str] = []

    def fill(self, candidates: Sequence[Candidate]) -> None:
        todo: list[DilationStructure] = []
        seen = set()
        for c in candidates:
            key = encode_structure(c.structure)
            if key not in self.values and key not in seen:
                seen.add(key)
                todo.append(c.structure)
        results = self.map_fn(partial(_safe_evaluate, self.evaluate, self.epochs), todo)
        for s, (value, warning) in zip(todo, results):
            self.values[encode_structure(s)] = value
            self.calls += 1
            if warning:
                log.warning(warning)
                self.warnings.append(warning)
        for c in candidates:
            c.fitness = self.values[encode_structure(c.structure)]


def _history_row(it: int, pop: Population) -> HistoryRow:
    fit = pop.fitness
    return HistoryRow(it, float(fit.max()), float(np.mean(fit)), pop.best.structure)


def _crossover_parents(pop: Population, n_pairs: int, rng: np.random.Generator):
    try:
        p = selection_probabilities(pop)
    except DegenerateFitnessError:
        warnings.warn("all fitness values are zero; selecting crossover parents uniformly",
                      RuntimeWarning, stacklevel=3)
        p = np.full(len(pop), 1.0 / len(pop))
    idx = rng.choice(len(pop), size=(n_pairs, 2), replace=True, p=p)
    return [(pop.candidates[i].structure, pop.candidates[j].structure) for i, j in idx]


def _genetic_offspring(pop: Population, cfg: GlobalSearchConfig, rng: np.random.Generator):
    children = []
    for a, b in _crossover_parents(pop, cfg.population_size // 2, rng):
        children.extend(crossover(a, b, rng))
    return [Candidate(mutate(c, cfg.mutation_prob, cfg.space, rng)) for c in children]


def _random_offspring(pop: Population, cfg: GlobalSearchConfig, rng: np.random.Generator):
    return [Candidate(random_structure(cfg.space, cfg.shape, rng))
            for _ in range(cfg.offspring_per_iteration)]


@dataclass
class SearchState:
    """Everything needed to continue a run after ``iteration`` completed iterations."""

    iteration: int
    population: Population
    rng_state: dict
    history: list[HistoryRow]
    cache: dict[str, float]
    warnings: list[str]
    evaluations: int
    method: str = "genetic"


def _run(cfg: GlobalSearchConfig, evaluate: Evaluator, offspring_fn, method: str,
         map_fn: MapFn | None, checkpoint: Callable[[SearchState], None] | None,
         resume: SearchState | None, stop_after: int | None) -> GlobalSearchResult:
    if resume is not None:
        if resume.method != method:
            raise CheckpointError(f"checkpoint belongs to a {resume.method} run, not {method}")
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        cache = _FitnessCache(evaluate, cfg.epochs, map_fn, resume.cache)
        cache.warnings = list(resume.warnings)
        cache.calls = resume.evaluations
        pop = resume.population
        history = list(resume.history)
        start = resume.iteration
    else:
        rng = np.random.default_rng(cfg.seed)
        cache = _FitnessCache(evaluate, cfg.epochs, map_fn)
        initial = [Candidate(random_structure(cfg.space, cfg.shape, rng))
                   for _ in range(cfg.population_size)]
        cache.fill(initial)
        pop = Population(initial, cfg.population_size)
        history = []
        start = 0

    last = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    for it in range(start + 1, last + 1):
        children = offspring_fn(pop, cfg, rng)
        cache.fill(children)
        pop = select_top_m(pop.candidates + children, cfg.population_size)
        history.append(_history_row(it, pop))
        log.info("%s iteration %d: best %.3f mean %.3f", method, it,
                 history[-1].best_fitness, history[-1].mean_fitness)
        if checkpoint is not None:
            checkpoint(SearchState(it, pop, rng.bit_generator.state, list(history),
                                   dict(cache.values), list(cache.warnings), cache.calls, method))

    final = select_top_m(pop.candidates, cfg.population_size)
    return GlobalSearchResult(final, history, cache.warnings, cache.calls)


def run_global_search(cfg: GlobalSearchConfig, evaluate: Evaluator, *, map_fn: MapFn | None = None,
                      checkpoint: Callable[[SearchState], None] | None = None,
                      resume: SearchState | None = None,
                      stop_after: int | None = None) -> GlobalSearchResult:
    """Genetic global search.

    ``map_fn`` (e.g. ``executor.map``) evaluates new structures, possibly
    concurrently; results are consumed in submission order.  ``checkpoint`` is
    called after every iteration; passing its last state as ``resume``
    continues the run exactly.  ``stop_after`` halts after that iteration.
    """
    return _run(cfg, evaluate, _genetic_offspring, "genetic", map_fn, checkpoint, resume, stop_after)


def random_search_baseline(cfg: GlobalSearchConfig, evaluate: Evaluator, *,
                           map_fn: MapFn | None = None,
                           checkpoint: Callable[[SearchState], None] | None = None,
                           resume: SearchState | None = None,
                           stop_after: int | None = None) -> GlobalSearchResult:
    """Same loop and budget, but every new individual is drawn fresh from the space."""
    return _run(cfg, evaluate, _random_offspring, "random", map_fn, checkpoint, resume, stop_after)


# ---------------------------------------------------------------------------
# toy landscape


@dataclass(frozen=True)
class HammingLandscape:
    """Closed-form fitness ``100 * (1 - hamming(s, target) / L)``."""

    target: DilationStructure

    @classmethod
    def random(cls, space: GlobalSearchSpace, shape: Sequence[int], seed: int) -> HammingLandscape:
        return cls(random_structure(space, shape, np.random.default_rng(seed)))

    def __call__(self, structure: DilationStructure, epochs: int = 0) -> float:
        a, b = structure.flat, self.target.flat
        if len(a) != len(b):
            raise ShapeError("structure and target differ in length")
        return 100.0 * sum(x == y for x, y in zip(a, b)) / len(a)


# ---------------------------------------------------------------------------
# files

HISTORY_HEADER = ("iteration", "best_fitness", "mean_fitness", "best_structure")


def history_csv(history: Sequence[HistoryRow]) -> str:
    """CSV text; floats use ``repr`` so values round-trip exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for row in history:
        w.writerow((row.iteration, repr(row.best_fitness), repr(row.mean_fitness),
                    encode_structure(row.best_structure)))
    return buf.getvalue()


def read_history_csv(text: str) -> list[HistoryRow]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != HISTORY_HEADER:
        raise CheckpointError("history CSV has an unexpected header")
    return [HistoryRow(int(r[0]), float(r[1]), float(r[2]), decode_structure(r[3])) for r in rows[1:]]


def _state_to_dict(state: SearchState, cfg: GlobalSearchConfig | None) -> dict:
    return {
        "format": "g2l-population",
        "version": 1,
        "method": state.method,
        "iteration": state.iteration,
        "population": [[encode_structure(c.structure), c.fitness] for c in state.population],
        "capacity": state.population.capacity,
        "rng_state": state.rng_state,
        "history": [[h.iteration, h.best_fitness, h.mean_fitness, encode_structure(h.best_structure)]
                    for h in state.history],
        "cache": state.cache,
        "warnings": state.warnings,
        "evaluations": state.evaluations,
        "config": None if cfg is None else {
            "iterations": cfg.iterations, "population_size": cfg.population_size,
            "mutation_prob": cfg.mutation_prob, "epochs": cfg.epochs, "seed": cfg.seed,
            "k": cfg.space.k, "T": cfg.space.T, "shape": list(cfg.shape)},
    }


def save_checkpoint(path, state: SearchState, cfg: GlobalSearchConfig | None = None) -> None:
    """Write atomically so an interruption never leaves a half-written file."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(_state_to_dict(state, cfg), sort_keys=True))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[SearchState, dict | None]:
    """Returns the state and the config echo stored with it."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
        if d.get("format") != "g2l-population":
            raise CheckpointError(f"{path}: not a population checkpoint")
        pop = Population([Candidate(decode_structure(s), float(f)) for s, f in d["population"]],
                         int(d["capacity"]))
        history = [HistoryRow(int(i), float(b), float(m), decode_structure(s))
                   for i, b, m, s in d["history"]]
        state = SearchState(int(d["iteration"]), pop, d["rng_state"], history,
                            {k: float(v) for k, v in d["cache"].items()}, list(d["warnings"]),
                            int(d["evaluations"]), d["method"])
    except CheckpointError:
        raise
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return state, d.get("config")
