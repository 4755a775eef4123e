"""Microbial genetic black-box attack seeded by a white-box surrogate attack.

Individuals are perturbations ``delta`` around the benign image. Each
generation picks two random individuals, breeds the winner with the loser
through a crossover mask, sign-flips a sparse random subset of the child and
lets the child replace the loser. Every fitness evaluation costs exactly one
query to the target oracle.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from vitdeceive.attacks.whitebox import AdversarialExample, AttackConfig, advit_whitebox_batch
from vitdeceive.interpret.maps import AttributionMap
from vitdeceive.model import PredictionRecord, ToyViT

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class QueryBudgetExceeded(RuntimeError):
    """The target oracle refused a query beyond its budget."""


class TargetOracle:
    """Query-only view of a target model: ``evaluate(image) -> probabilities``.

    ``transforms`` are applied to every query before the model sees it (the
    attacker never observes them). ``queries`` counts every evaluation.
    """

    def __init__(
        self,
        model: ToyViT,
        transforms: Sequence[Callable[[np.ndarray, np.random.Generator], np.ndarray]] = (),
        budget: Optional[int] = None,
        seed: int = 0,
    ):
        self.model = model
        self.transforms = list(transforms)
        self.budget = budget
        self.queries = 0
        self.rng = np.random.default_rng(seed)

    def evaluate(self, image: np.ndarray) -> np.ndarray:
        if self.budget is not None and self.queries >= self.budget:
            raise QueryBudgetExceeded(f"query budget of {self.budget} exhausted")
        self.queries += 1
        img = np.asarray(image, dtype=np.float32)
        for t in self.transforms:
            img = t(img, self.rng)
        with torch.no_grad():
            logits = self.model(torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None])[0]
        return torch.softmax(logits.double(), -1).numpy()


@dataclass
class MGAConfig:
    mutation_rate: float = 1e-4
    crossover_rate: float = 0.7
    population: int = 5
    generations: int = 295
    epsilon: float = 0.031
    zeta: float = 0.1
    init_noise: float = 0.5
    seeding: str = "noise"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if not 0.0 <= self.crossover_rate <= 1.0:
            raise ValueError("crossover_rate must lie in [0, 1]")
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.seeding not in ("noise", "distinct"):
            raise ValueError(f"unknown seeding {self.seeding!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Individual:
    delta: np.ndarray
    fitness: Optional[float] = None


@dataclass
class Population:
    individuals: list[Individual]
    generation: int = 0
    queries: int = 0

    def __len__(self) -> int:
        return len(self.individuals)

    @property
    def best_fitness(self) -> float:
        vals = [i.fitness for i in self.individuals if i.fitness is not None]
        return max(vals) if vals else float("-inf")


def project(delta: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip to the L-inf box and keep ``x + delta`` inside [0, 1]."""
    d = np.clip(delta, -epsilon, epsilon)
    return np.clip(x + d, 0.0, 1.0) - x


def init_population(
    x: np.ndarray, x_adv: np.ndarray, epsilon: float, n: int, rng: np.random.Generator, noise: float = 0.5
) -> Population:
    """White-box perturbation plus ``n - 1`` copies jittered by uniform noise of ``noise * epsilon``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if n < 1:
        raise ValueError("population size must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    base = project(np.asarray(x_adv, dtype=np.float64) - x, x, epsilon)
    inds = [Individual(base.copy())]
    for _ in range(n - 1):
        jitter = rng.uniform(-noise * epsilon, noise * epsilon, size=x.shape)
        inds.append(Individual(project(base + jitter, x, epsilon)))
    return Population(inds)


def fitness(oracle, x: np.ndarray, delta: np.ndarray, cls: int, zeta: float = 0.1) -> tuple[float, np.ndarray]:
    """``CE(F'(x + delta), c) - zeta * ||delta||_2 / sqrt(d)`` and the queried probabilities.

    Exactly one oracle query. Higher is better for the attacker.
    """
    image = np.clip(np.asarray(x) + delta, 0.0, 1.0)
    probs = np.asarray(oracle.evaluate(image), dtype=np.float64)
    ce = -np.log(max(float(probs[cls]), PROB_FLOOR))
    penalty = zeta * float(np.linalg.norm(delta.ravel())) / np.sqrt(delta.size)
    return ce - penalty, probs


def select(pop: Population, rng: np.random.Generator) -> tuple[int, int]:
    """Indices ``(winner, loser)`` of two distinct random individuals; ties go to the lower index."""
    if len(pop) < 2:
        raise ValueError("selection needs at least two individuals")
    i, j = (int(v) for v in rng.choice(len(pop), size=2, replace=False))
    fi, fj = pop.individuals[i].fitness, pop.individuals[j].fitness
    if fi > fj or (fi == fj and i < j):
        return i, j
    return j, i


def crossover(winner: np.ndarray, loser: np.ndarray, cr: float, rng: np.random.Generator) -> np.ndarray:
    mask = rng.random(winner.shape) < cr
    return np.where(mask, winner, loser)


def mutate(child: np.ndarray, mr: float, rng: np.random.Generator, x: Optional[np.ndarray] = None, epsilon: Optional[float] = None) -> np.ndarray:
    """Sign-flip entries under a density-``mr`` mask, then re-project when ``x`` and ``epsilon`` are given."""
    mask = rng.random(child.shape) < mr
    out = np.where(mask, -child, child)
    if x is not None and epsilon is not None:
        out = project(out, x, epsilon)
    return out


@dataclass
class MGAResult:
    """Outcome of one evolution, before maps are attached."""

    delta: np.ndarray
    success: bool
    queries: int
    generations: int
    probs: np.ndarray
    best_fitness: list = field(default_factory=list)
    note: str = ""


def evolve(oracle, x: np.ndarray, cls: int, pop: Population, config: MGAConfig, rng: np.random.Generator) -> MGAResult:
    """Run the generation loop; stops at the first query that changes the label."""
    x = np.asarray(x, dtype=np.float64)
    start = oracle.queries
    trace: list[float] = []
    last_probs = None
    try:
        for ind in pop.individuals:
            ind.fitness, probs = fitness(oracle, x, ind.delta, cls, config.zeta)
            pop.queries = oracle.queries - start
            last_probs = probs
            if int(np.argmax(probs)) != cls:
                return MGAResult(ind.delta, True, pop.queries, 0, probs, [pop.best_fitness])
        trace.append(pop.best_fitness)
        best = max(pop.individuals, key=lambda i: i.fitness)
        for g in range(1, config.generations + 1):
            if len(pop) < 2:
                break
            w, l = select(pop, rng)
            child = crossover(pop.individuals[w].delta, pop.individuals[l].delta, config.crossover_rate, rng)
            child = mutate(child, config.mutation_rate, rng, x, config.epsilon)
            f, probs = fitness(oracle, x, child, cls, config.zeta)
            pop.queries = oracle.queries - start
            pop.generation = g
            pop.individuals[l] = Individual(child, f)
            trace.append(pop.best_fitness)
            if int(np.argmax(probs)) != cls:
                return MGAResult(child, True, pop.queries, g, probs, trace)
            best = max(pop.individuals, key=lambda i: i.fitness)
            last_probs = probs
        note = "generations exhausted"
    except QueryBudgetExceeded:
        note = "query budget exhausted"
        if not any(i.fitness is not None for i in pop.individuals):
            return MGAResult(pop.individuals[0].delta, False, pop.queries, pop.generation, np.full(0, np.nan), trace, note)
        best = max((i for i in pop.individuals if i.fitness is not None), key=lambda i: i.fitness)
    return MGAResult(best.delta, False, pop.queries, pop.generation, last_probs, trace, note)


def mga_attack(
    surrogate: ToyViT,
    interpreter,
    oracle: TargetOracle,
    x: torch.Tensor,
    cls: int,
    config: MGAConfig = MGAConfig(),
    whitebox: AttackConfig = AttackConfig(),
    judge: Optional[tuple] = None,
) -> AdversarialExample:
    """Seed with a white-box attack on ``surrogate``, then evolve against ``oracle``.

    With ``seeding="noise"`` the population is the white-box perturbation
    plus jittered copies; ``"distinct"`` runs one white-box attack per
    individual, each from its own random start in the box.
    ``judge = (model, interpreter)`` names the system whose maps are reported
    for the benign and adversarial images (defaults to the surrogate pair).
    On success the adversarial record is the oracle response that flipped
    the label; otherwise both records come from the target model directly
    (those evaluations are bookkeeping, not attack queries).
    """
    x = x if x.dim() == 3 else x[0]
    rng = np.random.default_rng(config.seed)
    wb = AttackConfig(**{**whitebox.to_dict(), "epsilon": config.epsilon})
    xn = x.detach().numpy().astype(np.float64)
    if config.seeding == "distinct":
        reps = x[None].repeat(config.population, 1, 1, 1)
        jitter = rng.uniform(-config.epsilon, config.epsilon, size=reps.shape).astype(np.float32)
        jitter[0] = 0.0
        seeds = advit_whitebox_batch(surrogate, interpreter, reps, int(cls), wb, start=reps + torch.from_numpy(jitter))
        pop = Population([Individual(project(r.x_adv.astype(np.float64) - xn, xn, config.epsilon)) for r in seeds])
    else:
        seed = advit_whitebox_batch(surrogate, interpreter, x[None], int(cls), wb)[0]
        pop = init_population(xn, seed.x_adv, config.epsilon, config.population, rng, config.init_noise)
    res = evolve(oracle, xn, int(cls), pop, config, rng)
    x_adv = np.clip(xn + res.delta, 0.0, 1.0).astype(np.float32)

    j_model, j_interp = judge if judge is not None else (surrogate, interpreter)
    with torch.no_grad():
        benign_logits = oracle.model(x[None])[0]
        adv_logits = oracle.model(torch.from_numpy(x_adv)[None])[0]
        jb = j_model(x[None]).argmax(-1)
        ja = j_model(torch.from_numpy(x_adv)[None]).argmax(-1)
    hw = tuple(x.shape[-2:])
    bmap = AttributionMap.from_tokens(j_interp.token_scores(j_model, x[None], jb)[0], hw, j_interp.name)
    amap = AttributionMap.from_tokens(j_interp.token_scores(j_model, torch.from_numpy(x_adv)[None], ja)[0], hw, j_interp.name)
    if res.success:
        adv_logits = torch.log(torch.from_numpy(np.clip(res.probs, PROB_FLOOR, None)))
    adv_record = PredictionRecord.from_logits(adv_logits)
    return AdversarialExample(
        x=xn.astype(np.float32),
        x_adv=x_adv,
        benign=PredictionRecord.from_logits(benign_logits),
        adversarial=adv_record,
        benign_map=bmap,
        adv_map=amap,
        success=res.success,
        loss_trajectory=res.best_fitness,
        queries=res.queries,
        note=res.note,
    )
