"""Genome encoding of attack schemes and the five search strategies over
them: differential evolution, particle swarm, local search, random search
(single objective: robust accuracy), and NSGA-II over (robust accuracy,
gradient-evaluation cost).

Genomes are integer vectors of length 4k, one (op, loss, eps_idx, steps_idx)
block per cell, each gene a 1-based index into the search space's choice
lists. A SearchSpace restriction shrinks the choice lists, which is how the
brute-force oracle spaces used in the tests are built.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackCell, AttackScheme, EvalResult, run_scheme
from .errors import ArgumentError, ValidationError
from .losses import LOSS_IDS
from .util import parallel_map, rng_from

N_GRID = 8
GENES_PER_CELL = 4


@dataclass(frozen=True)
class SearchSpace:
    """Per-slot choice lists; the full space uses every operator/loss/index."""

    norm: object
    ops: tuple
    losses: tuple = LOSS_IDS
    eps_choices: tuple = tuple(range(1, N_GRID + 1))
    steps_choices: tuple = tuple(range(1, N_GRID + 1))
    k: int = 3
    restart: bool = False

    @classmethod
    def full(cls, norm, k=3, restart=False):
        return cls(norm=norm, ops=norm.ops, k=k, restart=restart)

    def bounds(self):
        per_cell = [len(self.ops), len(self.losses), len(self.eps_choices),
                    len(self.steps_choices)]
        return np.array(per_cell * self.k, dtype=np.int64)

    def size(self):
        per_cell = len(self.ops) * len(self.losses) * len(self.eps_choices) \
            * len(self.steps_choices)
        return per_cell ** self.k


@dataclass(frozen=True)
class Genome:
    genes: tuple
    active_cells: int

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(int(g) for g in self.genes))

    def key(self):
        return (self.genes[:GENES_PER_CELL * self.active_cells], self.active_cells)


def validate_genome(genome, space):
    bounds = space.bounds()
    problems = []
    if len(genome.genes) != len(bounds):
        problems.append(f"genome length {len(genome.genes)} != {len(bounds)}")
    else:
        for i, (g, b) in enumerate(zip(genome.genes, bounds)):
            if not 1 <= g <= b:
                problems.append(f"gene {i} = {g} outside 1..{b}")
    if not 1 <= genome.active_cells <= space.k:
        problems.append(f"active_cells {genome.active_cells} outside 1..{space.k}")
    if problems:
        raise ValidationError(problems)


def decode(genome, space):
    """Genome -> AttackScheme through the space's choice lists."""
    validate_genome(genome, space)
    cells = []
    for c in range(genome.active_cells):
        op_g, loss_g, eps_g, steps_g = genome.genes[4 * c: 4 * c + 4]
        cells.append(AttackCell(
            op=space.ops[op_g - 1],
            loss=space.losses[loss_g - 1],
            eps_idx=space.eps_choices[eps_g - 1],
            steps_idx=space.steps_choices[steps_g - 1],
            restart=space.restart,
        ))
    return AttackScheme(tuple(cells), space.norm)


def encode(scheme, space):
    """AttackScheme -> Genome; the scheme must live inside the space."""
    genes = []
    for cell in scheme.cells:
        try:
            genes.extend([
                space.ops.index(cell.op) + 1,
                space.losses.index(cell.loss) + 1,
                space.eps_choices.index(cell.eps_idx) + 1,
                space.steps_choices.index(cell.steps_idx) + 1,
            ])
        except ValueError as exc:
            raise ValidationError([f"cell not representable in space: {exc}"])
    active = len(scheme.cells)
    genes.extend([1] * (GENES_PER_CELL * (space.k - active)))
    return Genome(tuple(genes), active)


def random_genome(space, rng, active_cells=None):
    bounds = space.bounds()
    genes = tuple(int(rng.integers(1, b + 1)) for b in bounds)
    active = space.k if active_cells is None else active_cells
    return Genome(genes, active)


# ---------------------------------------------------------------------------
# evaluation with memoization


class Evaluator:
    """run_scheme wrapper memoized per (genome, model, dataset)."""

    def __init__(self, model, dataset, space, seed=0, jobs=1):
        self.model = model
        self.dataset = dataset
        self.space = space
        self.seed = seed
        self.jobs = jobs
        self.model_id = model.fingerprint() if hasattr(model, "fingerprint") else str(id(model))
        self.dataset_id = dataset.fingerprint()
        self.cache = {}
        self.cache_hits = 0
        self.calls = 0

    def __call__(self, genome):
        return self.evaluate_many([genome])[0]

    def evaluate_many(self, genomes):
        self.calls += len(genomes)
        fresh = []
        seen = set()
        for g in genomes:
            key = g.key()
            if key in self.cache:
                self.cache_hits += 1
            elif key not in seen:
                seen.add(key)
                fresh.append(g)
            else:
                self.cache_hits += 1

        def run(g):
            scheme = decode(g, self.space)
            result, _ = run_scheme(self.model, self.dataset, scheme, seed=self.seed)
            return result

        for g, res in zip(fresh, parallel_map(run, fresh, self.jobs)):
            self.cache[g.key()] = res
        return [self.cache[g.key()] for g in genomes]

    @property
    def evals_used(self):
        return self.calls


@dataclass
class TraceRow:
    generation: int
    best_robust_acc: float
    best_cost_units: int
    evals_used: int


def write_trace(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["generation", "best_robust_acc", "best_cost_units", "evals_used"])
        for r in rows:
            writer.writerow([r.generation, r.best_robust_acc, r.best_cost_units, r.evals_used])


def _round_clamp(x, bounds):
    out = np.floor(x + 0.5)
    return np.clip(out, 1, bounds).astype(np.int64)


def _best_index(results):
    """argmin by robust accuracy, ties by cost."""
    keys = [(r.robust_acc, r.cost_units, i) for i, r in enumerate(results)]
    return min(keys)[2]


# ---------------------------------------------------------------------------
# single-objective searchers


def de_search(model, dataset, norm, pop=20, gens=5, F=0.5, CR=0.9, seed=0,
              space=None, jobs=1):
    """DE/rand/1/bin in continuous gene space with round-and-clamp decoding.

    After crossover each offspring gets, with probability 0.2, a single
    uniformly chosen gene shifted by +-1 (the fine-tuning step); replacement
    is greedy one-vs-one on robust accuracy.
    """
    if pop < 4:
        raise ArgumentError(f"DE needs pop >= 4, got {pop}")
    space = space or SearchSpace.full(norm)
    bounds = space.bounds()
    rng = rng_from(seed, "de")
    evaluator = Evaluator(model, dataset, space, seed=seed, jobs=jobs)
    positions = rng.uniform(1.0, bounds + 1.0 - 1e-9, size=(pop, len(bounds)))
    genomes = [Genome(tuple(_round_clamp(p, bounds)), space.k) for p in positions]
    fitness = [r.robust_acc for r in evaluator.evaluate_many(genomes)]
    trace = []

    def record(gen):
        results = evaluator.evaluate_many(genomes)
        i = _best_index(results)
        trace.append(TraceRow(gen, results[i].robust_acc, results[i].cost_units,
                              evaluator.evals_used))

    record(0)
    for gen in range(1, gens + 1):
        children = []
        for i in range(pop):
            others = [j for j in range(pop) if j != i]
            r1, r2, r3 = rng.choice(others, size=3, replace=False)
            v = positions[r1] + F * (positions[r2] - positions[r3])
            mask = rng.random(len(bounds)) <= CR
            mask[int(rng.integers(0, len(bounds)))] = True
            u = np.where(mask, v, positions[i])
            if rng.random() < 0.2:
                g = int(rng.integers(0, len(bounds)))
                u[g] += 1.0 if rng.random() < 0.5 else -1.0
            u = np.clip(u, 1.0, bounds.astype(np.float64))
            children.append(u)
        child_genomes = [Genome(tuple(_round_clamp(c, bounds)), space.k) for c in children]
        child_fit = [r.robust_acc for r in evaluator.evaluate_many(child_genomes)]
        for i in range(pop):
            if child_fit[i] < fitness[i]:
                positions[i] = children[i]
                genomes[i] = child_genomes[i]
                fitness[i] = child_fit[i]
        record(gen)
    results = evaluator.evaluate_many(genomes)
    return genomes[_best_index(results)], trace


def pso_search(model, dataset, norm, pop=20, gens=5, w=0.7, c1=1.5, c2=1.5, seed=0,
               space=None, jobs=1):
    """Particle swarm on continuous gene positions, decoded by rounding."""
    if pop < 4:
        raise ArgumentError(f"PSO needs pop >= 4, got {pop}")
    space = space or SearchSpace.full(norm)
    bounds = space.bounds()
    fbounds = bounds.astype(np.float64)
    vmax = (fbounds - 1.0) / 2.0
    rng = rng_from(seed, "pso")
    evaluator = Evaluator(model, dataset, space, seed=seed, jobs=jobs)
    x = rng.uniform(1.0, fbounds + 1.0 - 1e-9, size=(pop, len(bounds)))
    v = np.zeros_like(x)
    genomes = [Genome(tuple(_round_clamp(p, bounds)), space.k) for p in x]
    fit = np.array([r.robust_acc for r in evaluator.evaluate_many(genomes)])
    pbest_x = x.copy()
    pbest_fit = fit.copy()
    pbest_genomes = list(genomes)
    g_idx = int(np.argmin(pbest_fit))
    gbest_x = pbest_x[g_idx].copy()
    gbest_genome = pbest_genomes[g_idx]
    gbest_fit = float(pbest_fit[g_idx])
    trace = []

    def record(gen):
        res = evaluator(gbest_genome)
        trace.append(TraceRow(gen, res.robust_acc, res.cost_units, evaluator.evals_used))

    record(0)
    for gen in range(1, gens + 1):
        r1 = rng.random(x.shape)
        r2 = rng.random(x.shape)
        v = w * v + c1 * r1 * (pbest_x - x) + c2 * r2 * (gbest_x - x)
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, 1.0, fbounds)
        genomes = [Genome(tuple(_round_clamp(p, bounds)), space.k) for p in x]
        fit = np.array([r.robust_acc for r in evaluator.evaluate_many(genomes)])
        improved = fit < pbest_fit
        pbest_x[improved] = x[improved]
        pbest_fit[improved] = fit[improved]
        for i in np.flatnonzero(improved):
            pbest_genomes[i] = genomes[i]
        g_idx = int(np.argmin(pbest_fit))
        if pbest_fit[g_idx] < gbest_fit:
            gbest_fit = float(pbest_fit[g_idx])
            gbest_x = pbest_x[g_idx].copy()
            gbest_genome = pbest_genomes[g_idx]
        record(gen)
    return gbest_genome, trace


_NEIGHBOR_MOVES = ("op", "loss", "eps", "steps", "append", "drop")


def neighbor(genome, space, rng):
    """One random local move; length changes stay within 1..k cells."""
    genes = list(genome.genes)
    active = genome.active_cells
    bounds = space.bounds()
    moves = ["op", "loss", "eps", "steps"]
    if active < space.k:
        moves.append("append")
    if active > 1:
        moves.append("drop")
    move = moves[int(rng.integers(0, len(moves)))]
    if move == "append":
        c = active
        for slot in range(GENES_PER_CELL):
            genes[4 * c + slot] = int(rng.integers(1, bounds[4 * c + slot] + 1))
        return Genome(tuple(genes), active + 1)
    if move == "drop":
        return Genome(tuple(genes), active - 1)
    c = int(rng.integers(0, active))
    slot = {"op": 0, "loss": 1, "eps": 2, "steps": 3}[move]
    i = 4 * c + slot
    if move in ("op", "loss"):
        if bounds[i] > 1:
            new = genes[i]
            while new == genes[i]:
                new = int(rng.integers(1, bounds[i] + 1))
            genes[i] = new
    else:
        delta = 1 if rng.random() < 0.5 else -1
        genes[i] = int(np.clip(genes[i] + delta, 1, bounds[i]))
    return Genome(tuple(genes), active)


def local_search(model, dataset, norm, iters=25, neigh=8, seed=0, space=None, jobs=1):
    """Best-of-neighborhood hill descent accepting ties (plateau walks),
    exploring variable scheme length via append/drop moves."""
    if iters < 1:
        raise ArgumentError(f"iters must be >= 1, got {iters}")
    space = space or SearchSpace.full(norm)
    rng = rng_from(seed, "local")
    evaluator = Evaluator(model, dataset, space, seed=seed, jobs=jobs)
    current = random_genome(space, rng, active_cells=int(rng.integers(1, space.k + 1)))
    cur_res = evaluator(current)
    trace = [TraceRow(0, cur_res.robust_acc, cur_res.cost_units, evaluator.evals_used)]
    for it in range(1, iters + 1):
        neighbors = [neighbor(current, space, rng) for _ in range(neigh)]
        results = evaluator.evaluate_many(neighbors)
        i = _best_index(results)
        if results[i].robust_acc <= cur_res.robust_acc:
            current, cur_res = neighbors[i], results[i]
        trace.append(TraceRow(it, cur_res.robust_acc, cur_res.cost_units,
                              evaluator.evals_used))
    return current, trace


def random_search_attacks(model, dataset, norm, budget=100, seed=0, space=None, jobs=1):
    """Uniform i.i.d. genomes; returns the lowest robust accuracy, ties by cost."""
    if budget < 1:
        raise ArgumentError(f"budget must be >= 1, got {budget}")
    space = space or SearchSpace.full(norm)
    rng = rng_from(seed, "random")
    evaluator = Evaluator(model, dataset, space, seed=seed, jobs=jobs)
    genomes = [random_genome(space, rng) for _ in range(budget)]
    results = evaluator.evaluate_many(genomes)
    trace = []
    best = None
    for i, res in enumerate(results):
        cand = (res.robust_acc, res.cost_units, i)
        if best is None or cand < best:
            best = cand
        trace.append(TraceRow(i, best[0], best[1], i + 1))
    return genomes[best[2]], trace


# ---------------------------------------------------------------------------
# multi-objective machinery


def nondominated_sort(points):
    """Pareto ranks under componentwise minimization (<= both, < at least one)."""
    pts = np.asarray(points, dtype=np.float64)
    if np.isnan(pts).any():
        raise ValidationError(["objective values contain NaN"])
    n = len(pts)
    dominated_by = [set() for _ in range(n)]
    dominates = [[] for _ in range(n)]
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if np.all(pts[i] <= pts[j]) and np.any(pts[i] < pts[j]):
                dominates[i].append(j)
            elif np.all(pts[j] <= pts[i]) and np.any(pts[j] < pts[i]):
                counts[i] += 1
    ranks = np.full(n, -1, dtype=np.int64)
    current = [i for i in range(n) if counts[i] == 0]
    rank = 0
    while current:
        nxt = []
        for i in current:
            ranks[i] = rank
            for j in dominates[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = nxt
        rank += 1
    return ranks


def crowding_distance(front):
    """Crowding distances; boundary members get +inf, interior members the
    sum of normalized neighbor gaps per objective."""
    pts = np.asarray(front, dtype=np.float64)
    n = len(pts)
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for m in range(pts.shape[1]):
        order = np.argsort(pts[:, m], kind="stable")
        lo, hi = pts[order[0], m], pts[order[-1], m]
        dist[order[0]] = np.inf
        dist[order[-1]] = np.inf
        if hi == lo:
            continue
        for pos in range(1, n - 1):
            i = order[pos]
            if np.isinf(dist[i]):
                continue
            dist[i] += (pts[order[pos + 1], m] - pts[order[pos - 1], m]) / (hi - lo)
    return dist


@dataclass
class ParetoArchive:
    fronts: list = field(default_factory=list)  # list of [(genome, EvalResult)]
    crowding: list = field(default_factory=list)

    def check_invariants(self):
        """Within a front no member dominates another; each rank-r member is
        dominated by someone in rank r-1."""
        def dominates(a, b):
            return (a.robust_acc <= b.robust_acc and a.cost_units <= b.cost_units
                    and (a.robust_acc < b.robust_acc or a.cost_units < b.cost_units))

        for r, front in enumerate(self.fronts):
            for i, (_, ri) in enumerate(front):
                for j, (_, rj) in enumerate(front):
                    if i != j and dominates(ri, rj):
                        raise ValidationError([f"front {r}: member {i} dominates {j}"])
            if r > 0:
                for _, ri in front:
                    if not any(dominates(rp, ri) for _, rp in self.fronts[r - 1]):
                        raise ValidationError(
                            [f"front {r}: member not dominated by front {r - 1}"])
        return True

    def to_json(self):
        import json

        payload = []
        for rank, front in enumerate(self.fronts):
            for genome, res in front:
                payload.append({
                    "rank": rank,
                    "genome": list(genome.genes[:GENES_PER_CELL * genome.active_cells]),
                    "active_cells": genome.active_cells,
                    "robust_acc": res.robust_acc,
                    "cost_units": res.cost_units,
                })
        return json.dumps(payload, indent=2)


def hypervolume_2d(points, ref):
    """Dominated hypervolume for 2-objective minimization."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts[(pts[:, 0] <= ref[0]) & (pts[:, 1] <= ref[1])]
    if len(pts) == 0:
        return 0.0
    ranks = nondominated_sort(pts)
    front = pts[ranks == 0]
    order = np.argsort(front[:, 0], kind="stable")
    front = front[order]
    hv = 0.0
    prev_f1 = ref[1]
    for f0, f1 in front:
        hv += (ref[0] - f0) * (prev_f1 - f1)
        prev_f1 = f1
    return float(hv)


def _tournament(rng, ranks, crowd):
    i, j = rng.integers(0, len(ranks), size=2)
    if ranks[i] != ranks[j]:
        return i if ranks[i] < ranks[j] else j
    if crowd[i] != crowd[j]:
        return i if crowd[i] > crowd[j] else j
    return min(i, j)


def nsga2_search(model, dataset, norm, pop=20, gens=5, Pc=0.9, Pm=None, seed=0,
                 space=None, jobs=1):
    """NSGA-II over (robust accuracy, cost units); returns the Pareto archive
    and the chosen genome (lowest robust accuracy, ties by least cost)."""
    if pop % 2 != 0:
        raise ArgumentError(f"NSGA-II needs an even population, got {pop}")
    space = space or SearchSpace.full(norm)
    bounds = space.bounds()
    if Pm is None:
        Pm = 1.0 / len(bounds)
    rng = rng_from(seed, "nsga2")
    evaluator = Evaluator(model, dataset, space, seed=seed, jobs=jobs)
    genomes = [random_genome(space, rng) for _ in range(pop)]
    results = evaluator.evaluate_many(genomes)
    trace = []

    def fronts_of(genomes, results):
        pts = [(r.robust_acc, r.cost_units) for r in results]
        ranks = nondominated_sort(pts)
        crowd = np.zeros(len(pts))
        for r in range(ranks.max() + 1):
            sel = np.flatnonzero(ranks == r)
            crowd[sel] = crowding_distance([pts[i] for i in sel])
        return ranks, crowd

    ranks, crowd = fronts_of(genomes, results)

    def record(gen):
        front0 = [i for i in range(len(genomes)) if ranks[i] == 0]
        best = min(front0, key=lambda i: (results[i].robust_acc, results[i].cost_units))
        trace.append(TraceRow(gen, results[best].robust_acc, results[best].cost_units,
                              evaluator.evals_used))

    record(0)
    for gen in range(1, gens + 1):
        children = []
        while len(children) < pop:
            a = genomes[_tournament(rng, ranks, crowd)]
            b = genomes[_tournament(rng, ranks, crowd)]
            g1, g2 = list(a.genes), list(b.genes)
            for i in range(len(bounds)):
                if rng.random() < Pc:
                    pool = (a.genes[i], b.genes[i])
                    g1[i] = pool[int(rng.integers(0, 2))]
                    g2[i] = pool[int(rng.integers(0, 2))]
            for g in (g1, g2):
                for i in range(len(bounds)):
                    if rng.random() < Pm:
                        g[i] = int(rng.integers(1, bounds[i] + 1))
            children.append(Genome(tuple(g1), space.k))
            children.append(Genome(tuple(g2), space.k))
        children = children[:pop]
        child_results = evaluator.evaluate_many(children)
        merged = genomes + children
        merged_results = results + child_results
        m_ranks, m_crowd = fronts_of(merged, merged_results)
        order = sorted(range(len(merged)),
                       key=lambda i: (m_ranks[i], -m_crowd[i], i))
        keep = order[:pop]
        genomes = [merged[i] for i in keep]
        results = [merged_results[i] for i in keep]
        ranks, crowd = fronts_of(genomes, results)
        record(gen)

    archive = ParetoArchive()
    for r in range(int(ranks.max()) + 1):
        sel = [i for i in range(len(genomes)) if ranks[i] == r]
        archive.fronts.append([(genomes[i], results[i]) for i in sel])
        archive.crowding.append([float(crowd[i]) for i in sel])
    front0 = archive.fronts[0]
    chosen = min(range(len(front0)),
                 key=lambda i: (front0[i][1].robust_acc, front0[i][1].cost_units))
    return archive, front0[chosen][0], trace


# ---------------------------------------------------------------------------
# exhaustive oracle


def brute_force_oracle(space, model, dataset, seed=0, jobs=1):
    """Evaluate every genome of a restricted space (<= 4096 of them)."""
    if space.size() > 4096:
        raise ArgumentError(f"space has {space.size()} genomes, oracle limit is 4096")
    choice_counts = space.bounds()
    evaluator = Evaluator(model, dataset, space, seed=seed, jobs=jobs)
    genomes = [Genome(genes, space.k)
               for genes in itertools.product(*(range(1, b + 1) for b in choice_counts))]
    results = evaluator.evaluate_many(genomes)
    table = list(zip(genomes, results))
    best = table[_best_index(results)]
    return table, best
