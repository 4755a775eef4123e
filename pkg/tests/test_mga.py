import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from vitdeceive.attacks.mga import (
    Individual,
    MGAConfig,
    Population,
    QueryBudgetExceeded,
    TargetOracle,
    crossover,
    evolve,
    fitness,
    init_population,
    mga_attack,
    mutate,
    project,
    select,
)
from vitdeceive.attacks.whitebox import AttackConfig
from vitdeceive.interpret.chefer import CheferInterpreter

from conftest import rand_images, tiny_model


class CountingOracle:
    """Mock target: fixed probabilities unless the image mean crosses a threshold."""

    def __init__(self, flip_above=None):
        self.queries = 0
        self.log = []
        self.flip_above = flip_above

    def evaluate(self, image):
        self.queries += 1
        self.log.append(np.array(image))
        if self.flip_above is not None and image.mean() > self.flip_above:
            return np.array([0.1, 0.9])
        p0 = 0.9 - 0.1 * float(np.abs(image).mean())
        return np.array([p0, 1 - p0])


def test_crossover_extremes_and_mask_oracle():
    w, l = np.full(50, 1.0), np.full(50, -1.0)
    assert np.array_equal(crossover(w, l, 1.0, np.random.default_rng(0)), w)
    assert np.array_equal(crossover(w, l, 0.0, np.random.default_rng(0)), l)
    shape = (3, 32, 32)
    w, l = np.random.default_rng(1).random(shape), np.random.default_rng(2).random(shape)
    child = crossover(w, l, 0.7, np.random.default_rng(5))
    mask = np.random.default_rng(5).random(shape) < 0.7
    assert np.array_equal(child, w * mask + l * (1 - mask))
    n = mask.size
    assert abs(mask.mean() - 0.7) <= 3 * np.sqrt(0.7 * 0.3 / n)


def test_mutate_extremes_and_mask_oracle():
    c = np.random.default_rng(0).standard_normal((3, 32, 32))
    assert np.array_equal(mutate(c, 1.0, np.random.default_rng(0)), -c)
    assert np.array_equal(mutate(c, 0.0, np.random.default_rng(0)), c)
    out = mutate(c, 1e-4, np.random.default_rng(9))
    mask = np.random.default_rng(9).random(c.shape) < 1e-4
    assert np.array_equal(out, -c * mask + c * (1 - mask))
    flips = [int((mutate(c, 1e-4, np.random.default_rng(s)) != c).sum()) for s in range(400)]
    assert abs(np.mean(flips) - 3072 * 1e-4) < 0.15


def test_fitness_matches_hand_oracle():
    model = tiny_model(depth=2, image_size=32)
    oracle = TargetOracle(model)
    x = rand_images(1, size=32)[0].numpy().astype(np.float64)
    delta = np.random.default_rng(0).uniform(-0.03, 0.03, x.shape)
    f, probs = fitness(oracle, x, delta, 2, 0.1)
    with torch.no_grad():
        logits = model(torch.from_numpy(np.clip(x + delta, 0, 1).astype(np.float32))[None])[0].double()
    p = torch.softmax(logits, -1).numpy()
    want = -np.log(p[2]) - 0.1 * np.sqrt((delta ** 2).sum()) / np.sqrt(delta.size)
    assert abs(f - want) < 1e-6
    assert oracle.queries == 1


def test_select_is_uniform_over_pairs():
    pop = Population([Individual(np.zeros(1), float(i)) for i in range(5)])
    rng = np.random.default_rng(0)
    counts = {}
    for _ in range(10_000):
        w, l = select(pop, rng)
        assert pop.individuals[w].fitness >= pop.individuals[l].fitness
        key = (min(w, l), max(w, l))
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 10
    assert stats.chisquare(list(counts.values())).pvalue > 1e-3


def test_select_ties_go_to_lower_index():
    pop = Population([Individual(np.zeros(1), 1.0) for _ in range(2)])
    assert select(pop, np.random.default_rng(0)) == (0, 1)
    with pytest.raises(ValueError):
        select(Population([Individual(np.zeros(1), 0.0)]), np.random.default_rng(0))


def test_epsilon_box_closure_over_many_operations():
    rng = np.random.default_rng(0)
    eps = 0.031
    x = rng.random((3, 8, 8))
    pop = init_population(x, x + rng.uniform(-0.1, 0.1, x.shape), eps, 5, rng)
    deltas = [i.delta for i in pop.individuals]
    for _ in range(10_000):
        i, j = rng.choice(5, 2, replace=False)
        child = crossover(deltas[i], deltas[j], rng.random(), rng)
        child = mutate(child, rng.random() * 0.01, rng, x, eps)
        assert np.abs(child).max() <= eps + 1e-12
        img = x + child
        assert img.min() >= -1e-12 and img.max() <= 1 + 1e-12
        deltas[j] = child


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(1e-3, 0.5))
def test_project_closure(seed, eps):
    rng = np.random.default_rng(seed)
    x = rng.random(20)
    d = project(rng.normal(0, 1, 20), x, eps)
    assert np.abs(d).max() <= eps + 1e-12
    assert (x + d).min() >= -1e-12 and (x + d).max() <= 1 + 1e-12


def test_init_population_contract():
    rng = np.random.default_rng(0)
    x = rng.random((3, 4, 4))
    pop = init_population(x, x + 0.02, 0.031, 5, rng)
    assert len(pop) == 5
    assert np.allclose(pop.individuals[0].delta, np.clip(x + 0.02, 0, 1) - x)
    with pytest.raises(ValueError):
        init_population(x, x, 0.0, 5, rng)
    with pytest.raises(ValueError):
        init_population(x, x, 0.1, 0, rng)


def test_config_validation():
    for bad in ({"mutation_rate": 2}, {"crossover_rate": -1}, {"population": 0}, {"epsilon": 0}, {"seeding": "x"}):
        with pytest.raises(ValueError):
            MGAConfig(**bad)


def test_query_ledger_and_elitism():
    rng = np.random.default_rng(0)
    x = np.full((3, 4, 4), 0.5)
    pop = init_population(x, x, 0.031, 5, rng)
    oracle = CountingOracle()
    cfg = MGAConfig(generations=40, mutation_rate=0.05)
    res = evolve(oracle, x, 0, pop, cfg, rng)
    assert not res.success
    assert res.queries == oracle.queries == len(oracle.log) == 5 + 40
    assert all(b >= a for a, b in zip(res.best_fitness, res.best_fitness[1:]))
    assert res.note == "generations exhausted"


def test_early_exit_on_label_flip():
    rng = np.random.default_rng(0)
    x = np.full((3, 4, 4), 0.5)
    pop = init_population(x, x + 0.03, 0.031, 5, rng)
    oracle = CountingOracle(flip_above=0.52)
    res = evolve(oracle, x, 0, pop, MGAConfig(), rng)
    assert res.success and res.queries == 1 and res.generations == 0


def test_budget_exhaustion_is_a_failure():
    rng = np.random.default_rng(0)
    x = np.full((3, 4, 4), 0.5)
    oracle = TargetOracle(tiny_model(depth=1, image_size=4, patch_size=2), budget=7)
    pop = init_population(x, x, 0.031, 5, rng)
    res = evolve(oracle, x, 0, pop, MGAConfig(generations=100), rng)
    if not res.success:
        assert res.note == "query budget exhausted"
    assert res.queries <= 7
    with pytest.raises(QueryBudgetExceeded):
        oracle.evaluate(x)


def test_oracle_applies_transforms():
    model = tiny_model(depth=1, image_size=16)
    seen = []
    oracle = TargetOracle(model, [lambda img, rng: seen.append(img.copy()) or np.zeros_like(img)])
    x = np.random.default_rng(0).random((3, 16, 16))
    p = oracle.evaluate(x)
    with torch.no_grad():
        want = torch.softmax(model(torch.zeros(1, 3, 16, 16))[0].double(), -1).numpy()
    assert np.allclose(p, want) and len(seen) == 1


@pytest.mark.parametrize("seeding", ["noise", "distinct"])
def test_mga_attack_end_to_end(seeding):
    surrogate = tiny_model(depth=2, image_size=32, seed=0)
    target = tiny_model(depth=3, image_size=32, seed=1)
    x = rand_images(1, size=32)[0]
    cls = int(target(x[None]).argmax())
    oracle = TargetOracle(target, budget=30)
    cfg = MGAConfig(generations=20, seeding=seeding, population=3)
    r = mga_attack(surrogate, CheferInterpreter(), oracle, x, cls, cfg, AttackConfig(iterations=3))
    assert r.queries <= 23 and r.queries == oracle.queries
    assert np.abs(r.delta).max() <= cfg.epsilon + 1e-6
    assert r.success == (r.adversarial.label != cls)
    assert r.benign_map.pixel_map.shape == (32, 32)
