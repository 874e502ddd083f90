"""Open-loop intervention planning: a genetic algorithm proposes action
sequences, MCTS refines each proposal, and the best refined plan wins.

A chromosome is a length-``horizon`` vector of action indices for one
patient, executed open-loop from the patient's reset state. Its fitness is the
discounted return of that execution, averaged over noise draws. Fitness noise
is drawn from a generator seeded by the genome itself, so a genome always gets
the same fitness no matter when or where it is evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cohort_env import reset
from .errors import ConfigError, UsageError


@dataclass
class Chromosome:
    actions: np.ndarray
    fitness: float | None = None

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)

    @property
    def key(self):
        return tuple(int(a) for a in self.actions)

    def copy(self):
        return Chromosome(self.actions.copy(), self.fitness)


@dataclass
class GaConfig:
    population: int = 64
    generations: int = 40
    tournament: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float = 0.05
    elite: int = 2
    n_candidates: int = 5
    fitness_rollouts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.population < 1 or self.generations < 0:
            raise ConfigError("population must be >= 1 and generations >= 0")
        if not 1 <= self.elite <= self.population:
            raise ConfigError("elite must be in [1, population]")
        if not 1 <= self.tournament <= self.population:
            raise ConfigError("tournament must be in [1, population]")
        if not 0.0 <= self.crossover_rate <= 1.0 or not 0.0 <= self.mutation_rate <= 1.0:
            raise ConfigError("crossover_rate and mutation_rate must be in [0, 1]")
        if not 1 <= self.n_candidates <= self.population:
            raise ConfigError("n_candidates must be in [1, population]")
        if self.fitness_rollouts < 1:
            raise ConfigError("fitness_rollouts must be >= 1")


@dataclass
class MctsConfig:
    budget: int = 200
    exploration: float = math.sqrt(2.0)
    rollout_depth: int | None = None  # None: to the end of the horizon
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError("MCTS budget must be >= 1")
        if self.exploration <= 0:
            raise ConfigError("exploration constant must be > 0")
        if self.rollout_depth is not None and self.rollout_depth < 0:
            raise ConfigError("rollout_depth must be >= 0")


# ---------------------------------------------------------------------------
# simulator glue


def run_open_loop(cohort, patient_id, actions, rng=None, length=None, episode=0, fallback=None):
    """Execute ``actions`` from reset. Returns ``(rewards, actions_used, states)``.

    Steps past the end of ``actions`` ask ``fallback(states, t)`` for an action
    (no-op when no fallback is given).
    """
    cfg = cohort.config
    length = cfg.horizon if length is None else length
    g = cohort.group_of(patient_id)
    A, B, target = cohort.transition[g], cohort.action_effect[g], cohort.targets[g]
    s = reset(cohort, patient_id, episode).physiological
    states = [s]
    used, rewards = [], []
    for t in range(length):
        if t < len(actions):
            a = int(actions[t])
        else:
            a = int(fallback(states, t)) if fallback is not None else 0
        if not 0 <= a < cfg.n_actions:
            raise UsageError(f"action {a} outside [0, {cfg.n_actions})")
        s = A @ s + B[:, a]
        if cfg.noise_std > 0:
            s = s + cfg.noise_std * rng.standard_normal(cfg.state_dim)
        d = s - target
        rewards.append(-float(d @ d) - (cfg.action_cost if a > 0 else 0.0))
        used.append(a)
        states.append(s)
    return rewards, used, states


def discounted_sum(rewards, gamma):
    total = 0.0
    for r in reversed(rewards):
        total = r + gamma * total
    return total


def _genome_rng(seed, actions):
    return np.random.default_rng([int(seed), *(int(a) for a in actions)])


def fitness(chromosome, cohort, patient_id, gamma=None, rollouts=4, rng=None):
    """Mean discounted open-loop return over ``rollouts`` noise draws (cached)."""
    cfg = cohort.config
    actions = chromosome.actions if isinstance(chromosome, Chromosome) else np.asarray(chromosome)
    if len(actions) != cfg.horizon:
        raise UsageError(f"chromosome has {len(actions)} genes, horizon is {cfg.horizon}")
    gamma = cfg.discount if gamma is None else gamma
    if cfg.noise_std == 0:
        rollouts = 1
    rng = np.random.default_rng(0) if rng is None else rng
    total = 0.0
    for r in range(rollouts):
        rewards, _, _ = run_open_loop(cohort, patient_id, actions, rng, episode=r)
        total += discounted_sum(rewards, gamma)
    value = total / rollouts
    if isinstance(chromosome, Chromosome):
        chromosome.fitness = value
    return value


def make_fitness(cohort, patient_id, rollouts=4, seed=0, gamma=None):
    """Memoized ``actions -> fitness`` closure with genome-seeded noise."""
    memo = {}

    def fn(actions):
        key = tuple(int(a) for a in actions)
        if key not in memo:
            memo[key] = fitness(np.array(key), cohort, patient_id, gamma, rollouts, _genome_rng(seed, key))
        return memo[key]

    fn.cache = memo
    return fn


# ---------------------------------------------------------------------------
# genetic algorithm


def _evaluate(population, fitness_fn):
    for c in population:
        if c.fitness is None:
            c.fitness = float(fitness_fn(c.actions))


def _rank(population):
    """Indices by descending fitness, earlier index first on ties."""
    return sorted(range(len(population)), key=lambda i: (-population[i].fitness, i))


def _tournament(population, size, rng):
    idx = rng.choice(len(population), size=size, replace=False)
    return population[min(idx, key=lambda i: (-population[i].fitness, i))]


def evolve(population, config: GaConfig, fitness_fn, rng, n_actions):
    """One generation: elitism, then tournament -> one-point crossover -> mutation."""
    _evaluate(population, fitness_fn)
    P = len(population)
    order = _rank(population)
    nxt = [population[i].copy() for i in order[: min(config.elite, P)]]
    T = len(population[0].actions)
    while len(nxt) < P:
        p1 = _tournament(population, config.tournament, rng)
        p2 = _tournament(population, config.tournament, rng)
        child = p1.actions.copy()
        changed = False
        if T >= 2 and rng.random() < config.crossover_rate:
            cut = int(rng.integers(1, T))
            child[cut:] = p2.actions[cut:]
            changed = not np.array_equal(child, p1.actions)
        if config.mutation_rate > 0:
            mask = rng.random(T) < config.mutation_rate
            if mask.any():
                child[mask] = rng.integers(0, n_actions, size=int(mask.sum()))
                changed = changed or not np.array_equal(child, p1.actions)
        nxt.append(Chromosome(child, None if changed else p1.fitness))
    _evaluate(nxt, fitness_fn)
    return nxt


@dataclass
class GaResult:
    candidates: list  # best distinct chromosomes ever seen, best first
    history: list  # per generation {"generation", "best", "mean", "hall_of_fame_best"}


def ga_search(config: GaConfig, fitness_fn, horizon, n_actions, rng=None):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    population = [Chromosome(rng.integers(0, n_actions, size=horizon)) for _ in range(config.population)]
    _evaluate(population, fitness_fn)
    hall = {}

    def record(pop, gen):
        for c in pop:
            hall.setdefault(c.key, c.fitness)
        fits = np.array([c.fitness for c in pop])
        history.append({
            "generation": gen,
            "best": float(fits.max()),
            "mean": float(fits.mean()),
            "hall_of_fame_best": float(max(hall.values())),
        })

    history = []
    record(population, 0)
    for gen in range(1, config.generations + 1):
        population = evolve(population, config, fitness_fn, rng, n_actions)
        record(population, gen)
    # dicts keep first-seen order, so ties go to the earlier genome
    ranked = sorted(hall.items(), key=lambda kv: -kv[1])[: config.n_candidates]
    return GaResult([Chromosome(np.array(k), f) for k, f in ranked], history)


# ---------------------------------------------------------------------------
# Monte Carlo tree search


@dataclass
class SearchNode:
    depth: int
    action: int | None = None
    state: np.ndarray | None = None
    visits: int = 0
    value_sum: float = 0.0
    own_simulations: int = 0
    children: dict = field(default_factory=dict)

    @property
    def mean_value(self):
        return self.value_sum / self.visits if self.visits else 0.0

    def iter_nodes(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children.values())


def ucb_score(child, parent_visits, c):
    return child.value_sum / child.visits + c * math.sqrt(math.log(parent_visits) / child.visits)


def select_child(node, c):
    """UCB1 over fully visited children; lowest action wins ties."""
    best_a, best_s = None, -math.inf
    for a in sorted(node.children):
        child = node.children[a]
        if child.visits == 0:
            return a
        s = ucb_score(child, node.visits, c)
        if s > best_s:
            best_a, best_s = a, s
    return best_a


@dataclass
class MctsResult:
    estimate: float
    actions: list
    root: SearchNode
    greedy_actions: list
    best_simulated: tuple  # (return, actions)


def mcts_search(anchor, n_actions, horizon, simulate, evaluate, config: MctsConfig, rng=None):
    """Tree search over action prefixes, completed by the anchor's genes.

    ``simulate(actions, rng, length)`` returns ``(return, actions_used, states)``
    for one noisy execution of ``length`` steps; ``evaluate(actions)`` returns
    the (possibly averaged) value used to compare finished plans.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    anchor = [int(a) for a in anchor]
    root = SearchNode(depth=0)
    best_sim = (-math.inf, list(anchor))
    for _ in range(config.budget):
        node = root
        path = [root]
        while node.depth < horizon:
            untried = [a for a in range(n_actions) if a not in node.children]
            if untried:
                child = SearchNode(depth=node.depth + 1, action=untried[0])
                node.children[untried[0]] = child
                path.append(child)
                break
            node = node.children[select_child(node, config.exploration)]
            path.append(node)
        prefix = [n.action for n in path[1:]]
        if config.rollout_depth is None:
            length = horizon
        else:
            length = min(horizon, len(prefix) + config.rollout_depth)
        seq = prefix + anchor[len(prefix) : length]
        ret, used, states = simulate(seq, rng, length)
        leaf = path[-1]
        if leaf.state is None and leaf.depth < len(states):
            leaf.state = states[leaf.depth]
        leaf.own_simulations += 1
        for n in path:
            n.visits += 1
            n.value_sum += ret
        if length == horizon and ret > best_sim[0]:
            best_sim = (ret, list(used))

    greedy = []
    node = root
    while node.children:
        a = max(sorted(node.children), key=lambda k: node.children[k].mean_value)
        greedy.append(a)
        node = node.children[a]
    _, greedy_full, _ = simulate(greedy + anchor[len(greedy) :], np.random.default_rng(0), horizon)

    options = [greedy_full, best_sim[1], anchor]
    values = [evaluate(seq) for seq in options]
    i = int(np.argmax(values))
    return MctsResult(values[i], list(options[i]), root, greedy_full, best_sim)


def mcts_refine(chromosome, cohort, patient_id, config: MctsConfig, policy=None, rollouts=4, gamma=None, evaluate=None):
    """Refine one GA candidate for ``patient_id`` on ``cohort``.

    ``policy(states, t)`` supplies actions beyond the chromosome's genes.
    Returns an :class:`MctsResult` whose ``estimate`` is never below the
    chromosome's own evaluated fitness.
    """
    cfg = cohort.config
    actions = chromosome.actions if isinstance(chromosome, Chromosome) else np.asarray(chromosome)
    if len(actions) != cfg.horizon:
        raise UsageError(f"chromosome has {len(actions)} genes, horizon is {cfg.horizon}")
    gamma = cfg.discount if gamma is None else gamma
    if evaluate is None:
        evaluate = make_fitness(cohort, patient_id, rollouts, config.seed, gamma)
    counter = [0]

    def simulate(seq, rng, length):
        counter[0] += 1
        rewards, used, states = run_open_loop(
            cohort, patient_id, seq, rng, length, episode=counter[0], fallback=policy
        )
        return discounted_sum(rewards, gamma), used, states

    return mcts_search(actions, cfg.n_actions, cfg.horizon, simulate, evaluate, config)


def select_best(candidates, values):
    """Index of the highest value; the earliest candidate wins ties."""
    if len(candidates) == 0:
        raise UsageError("select_best needs at least one candidate")
    if len(values) != len(candidates):
        raise UsageError("one value per candidate is required")
    return int(np.argmax(np.asarray(values, dtype=np.float64)))


@dataclass
class SearchReport:
    patient_id: int
    candidates: list
    ga_fitness: list
    mcts_estimates: list
    refined: list
    selected: int
    history: list

    @property
    def best_actions(self):
        return self.refined[self.selected]

    @property
    def best_value(self):
        return self.mcts_estimates[self.selected]

    def to_dict(self):
        return {
            "patient_id": self.patient_id,
            "candidates": [
                {
                    "actions": [int(a) for a in c],
                    "ga_fitness": f,
                    "mcts_estimate": m,
                    "refined_actions": [int(a) for a in r],
                }
                for c, f, m, r in zip(self.candidates, self.ga_fitness, self.mcts_estimates, self.refined)
            ],
            "selected": {
                "index": self.selected,
                "actions": [int(a) for a in self.best_actions],
                "mcts_estimate": self.best_value,
            },
            "generations": self.history,
        }


def hybrid_search(cohort, patient_id, ga_config: GaConfig, mcts_config: MctsConfig, policy=None, executor=None):
    """GA proposals -> MCTS refinement of each -> argmax."""
    cohort.group_of(patient_id)
    cfg = cohort.config
    fit = make_fitness(cohort, patient_id, ga_config.fitness_rollouts, ga_config.seed)
    ga = ga_search(ga_config, fit, cfg.horizon, cfg.n_actions)

    def refine(c):
        return mcts_refine(c, cohort, patient_id, mcts_config, policy, ga_config.fitness_rollouts, evaluate=fit)

    if executor is None:
        results = [refine(c) for c in ga.candidates]
    else:
        results = list(executor.map(refine, ga.candidates))
    estimates = [r.estimate for r in results]
    best = select_best(ga.candidates, estimates)
    return SearchReport(
        patient_id=patient_id,
        candidates=[c.actions.tolist() for c in ga.candidates],
        ga_fitness=[float(c.fitness) for c in ga.candidates],
        mcts_estimates=[float(e) for e in estimates],
        refined=[r.actions for r in results],
        selected=best,
        history=ga.history,
    ), results
