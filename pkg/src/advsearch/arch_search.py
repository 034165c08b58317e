"""Eight architecture-search strategies under any robustness metric.

Differentiable family (first-order alternating updates on a weight-sharing
supernet): darts, nasp, fairdarts, smoothdarts, pcdarts. Non-differentiable
family (candidates trained with 7-step PGD adversarial training, scored by
the metric): random, de, ws_random (single-path supernet training followed by
shared-weight scoring of sampled genotypes).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError
from .models import (
    N_NODES,
    OP_IDS,
    Genotype,
    build_supernet,
    genotype_from_alpha,
    instantiate_genotype,
    random_genotype,
)
from .robustness import RobustnessMetric
from .training import Adam, AdversarialConfig, SGDMomentum, TrainSchedule, pgd_batch, train
from .util import parallel_map, rng_from

STRATEGIES = ("darts", "nasp", "fairdarts", "smoothdarts", "pcdarts",
              "random", "de", "ws_random")

_SUPERNET_MODE = {
    "darts": "darts",
    "nasp": "nasp",
    "fairdarts": "fairdarts",
    "smoothdarts": "smoothdarts",
    "pcdarts": "pcdarts",
    "ws_random": "darts",
}


@dataclass
class SearchConfig:
    strategy: str = "darts"
    metric: RobustnessMetric = field(default_factory=lambda: RobustnessMetric("adversarial"))
    epochs: int = 10
    warm_epochs: int = None  # defaults to 20% of epochs
    gamma: float = 1.0
    C: int = 8
    L: int = 4
    batch_size: int = 8
    w_lr: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 3e-3
    alpha_weight_decay: float = 1e-3
    channel_fraction: float = 0.5
    perturb: str = "random"  # smoothdarts: random | adversarial
    radius: float = 0.3
    pop: int = 4
    gens: int = 2
    n_samples: int = 4
    n_eval: int = 1000
    candidate_epochs: int = 5
    candidate_lr: float = 0.02
    adv_eps: float = 8.0 / 255.0
    adv_train: bool = True
    jobs: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy: {self.strategy!r}")
        if self.warm_epochs is None:
            self.warm_epochs = max(1, self.epochs // 5)
        # warm_epochs == epochs is the degenerate all-warm run (alpha untouched)
        if self.warm_epochs > self.epochs:
            raise ArgumentError(
                f"warm_epochs {self.warm_epochs} must be <= epochs {self.epochs}")
        for name in ("pop", "gens", "n_samples", "n_eval", "candidate_epochs"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        if not 0.0 < self.channel_fraction <= 1.0:
            raise ArgumentError(
                f"channel_fraction must be in (0, 1], got {self.channel_fraction}")
        if self.radius < 0:
            raise ArgumentError(f"radius must be >= 0, got {self.radius}")
        if self.perturb not in ("random", "adversarial"):
            raise ConfigError(f"unknown smoothdarts perturbation: {self.perturb!r}")
        if isinstance(self.metric, dict):
            self.metric = RobustnessMetric(**self.metric)


@dataclass
class ArchTraceRow:
    epoch: int
    val_loss: float
    metric_value: float


def write_arch_trace(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "val_loss", "metric_value"])
        for r in rows:
            writer.writerow([r.epoch, r.val_loss, r.metric_value])


def _split_halves(dataset, seed):
    rng = rng_from(seed, "split")
    perm = rng.permutation(len(dataset))
    half = len(dataset) // 2
    return dataset.subset(perm[:half]), dataset.subset(perm[half:])


def _in_channels(dataset):
    return dataset.inputs.shape[1] if dataset.inputs.ndim == 4 else 1


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


class _PathModel:
    """Supernet restricted to one genotype's path (shared weights)."""

    def __init__(self, supernet, genotype):
        self.supernet = supernet
        self.genotype = genotype

    def apply(self, x, train=False):
        return self.supernet.apply(x, train=train, genotype=self.genotype)

    def parameters(self):
        return self.supernet.weight_parameters()

    def fingerprint(self):
        return self.supernet.fingerprint() + self.genotype.to_json()


# ---------------------------------------------------------------------------
# differentiable family


def _one_hot_alpha(supernet, requires_grad):
    """prox to the vertex set: per-edge one-hot at the argmax entry."""
    out = []
    for ct in range(2):
        row = []
        for e in range(len(supernet.alpha[ct])):
            a = supernet.alpha[ct][e].data
            onehot = np.zeros_like(a)
            onehot[int(np.argmax(a))] = 1.0
            row.append(T.Tensor(onehot, requires_grad=requires_grad))
        out.append(row)
    return out


def _run_differentiable(config, dataset, seed, alpha_step, w_step):
    """Shared warm-then-alternate loop; returns (genotype, trace, supernet)."""
    metric = config.metric
    if metric.kind == "adversarial" and metric.scheme is None \
            and metric.attack not in ("FGSM", "PGD"):
        raise ConfigError(f"no differentiable loss for attack {metric.attack!r}")
    train_ds, val_ds = _split_halves(dataset, seed)
    n_classes = dataset.n_classes
    supernet = build_supernet(_SUPERNET_MODE[config.strategy], config.C, config.L,
                              n_classes, _in_channels(dataset),
                              config.channel_fraction, seed=seed)
    loss_train = metric.build_loss(train_ds)
    loss_val = metric.build_loss(val_ds)
    w_opt = SGDMomentum(supernet.weight_parameters(), config.w_lr,
                        momentum=config.w_momentum, weight_decay=config.w_weight_decay)
    a_opt = Adam(supernet.arch_parameters(), config.alpha_lr,
                 weight_decay=config.alpha_weight_decay)
    rng = rng_from(seed, "archsearch")
    eval_slice = val_ds.subset(np.arange(min(64, len(val_ds))))
    trace = []
    for epoch in range(config.epochs):
        w_opt.lr = config.w_lr * 0.5 * (1 + np.cos(np.pi * epoch / config.epochs))
        tb = _batches(len(train_ds), config.batch_size, rng)
        vb = _batches(len(val_ds), config.batch_size, rng)
        val_losses = []
        for bi in range(len(tb)):
            if epoch >= config.warm_epochs:
                vidx = vb[bi % len(vb)]
                val_losses.append(alpha_step(supernet, loss_val, val_ds, vidx, a_opt, rng))
            widx = tb[bi]
            w_step(supernet, loss_train, train_ds, widx, w_opt, rng,
                   warm=epoch < config.warm_epochs)
        metric_value = metric.score(supernet, eval_slice)
        trace.append(ArchTraceRow(epoch, float(np.mean(val_losses)) if val_losses else np.nan,
                                  metric_value))
    return genotype_from_alpha(supernet), trace, supernet


def _plain_alpha_step(supernet, loss_fn, ds, idx, a_opt, rng):
    with T.Tape() as tape:
        loss = loss_fn(supernet, ds.inputs[idx], ds.labels[idx], idx, train=True)
    tape.backward(loss)
    for p in supernet.weight_parameters():
        p.grad = None  # w is read-only during the alpha step
    a_opt.step()
    a_opt.zero_grad()
    return float(loss.data)


def _plain_w_step(supernet, loss_fn, ds, idx, w_opt, rng, warm=False, alpha_shift=None):
    with T.Tape() as tape:
        loss = loss_fn_with_shift(supernet, loss_fn, ds.inputs[idx], ds.labels[idx], idx,
                                  alpha_shift)
    tape.backward(loss)
    for p in supernet.arch_parameters():
        p.grad = None  # alpha is read-only during the w step
    w_opt.step()
    w_opt.zero_grad()


def loss_fn_with_shift(supernet, loss_fn, x, y, idx, alpha_shift):
    if alpha_shift is None:
        return loss_fn(supernet, x, y, idx, train=True)

    class _Shifted:
        def apply(self, xv, train=False):
            return supernet.apply(xv, train=train, alpha_shift=alpha_shift)

        def parameters(self):
            return supernet.parameters()

    return loss_fn(_Shifted(), x, y, idx, train=True)


def darts_search(config, dataset, seed=0):
    """First-order alternating search (warm epochs update weights only)."""
    return _run_differentiable(config, dataset, seed, _plain_alpha_step, _plain_w_step)


def pcdarts_search(config, dataset, seed=0):
    """Partial-channel mixed ops with edge normalization; otherwise darts."""
    return _run_differentiable(config, dataset, seed, _plain_alpha_step, _plain_w_step)


def nasp_search(config, dataset, seed=0):
    """Proximal steps: forward at the per-edge one-hot discretization, then a
    clamped plain gradient update of the continuous alpha."""

    def alpha_step(supernet, loss_fn, ds, idx, a_opt, rng):
        bar = _one_hot_alpha(supernet, requires_grad=True)
        with T.Tape() as tape:
            loss = loss_fn_with_override(supernet, loss_fn, ds, idx, bar)
        tape.backward(loss)
        for ct in range(2):
            for e, bar_t in enumerate(bar[ct]):
                g = bar_t.grad if bar_t.grad is not None else 0.0
                a = supernet.alpha[ct][e]
                a.data = np.clip(a.data - g, 0.0, 1.0)
        for p in supernet.parameters():
            p.grad = None
        return float(loss.data)

    def w_step(supernet, loss_fn, ds, idx, w_opt, rng, warm=False):
        bar = _one_hot_alpha(supernet, requires_grad=False)
        with T.Tape() as tape:
            loss = loss_fn_with_override(supernet, loss_fn, ds, idx, bar)
        tape.backward(loss)
        for p in supernet.arch_parameters():
            p.grad = None
        w_opt.step()
        w_opt.zero_grad()

    return _run_differentiable(config, dataset, seed, alpha_step, w_step)


def loss_fn_with_override(supernet, loss_fn, ds, idx, override):
    class _Discrete:
        def apply(self, xv, train=False):
            return supernet.apply(xv, train=train, alpha_override=override)

        def parameters(self):
            return supernet.parameters()

    return loss_fn(_Discrete(), ds.inputs[idx], ds.labels[idx], idx, train=True)


def fairdarts_search(config, dataset, seed=0):
    """Sigmoid gates plus the zero-one loss pushing gates away from 0.5."""

    def alpha_step(supernet, loss_fn, ds, idx, a_opt, rng):
        with T.Tape() as tape:
            loss = loss_fn(supernet, ds.inputs[idx], ds.labels[idx], idx, train=True)
            terms = []
            count = 0
            for ct in range(2):
                for a in supernet.alpha[ct]:
                    s = T.sub(T.sigmoid(a), np.full(a.data.shape, 0.5))
                    terms.append(T.reduce_sum(T.mul(s, s)))
                    count += a.data.size
            l01 = T.scale(T.add_n(terms), -1.0 / count)
            total = T.add(loss, l01)
        tape.backward(total)
        for p in supernet.weight_parameters():
            p.grad = None
        a_opt.step()
        a_opt.zero_grad()
        return float(loss.data)

    return _run_differentiable(config, dataset, seed, alpha_step, _plain_w_step)


def zero_one_loss(supernet):
    """-(1/N) sum (sigma(alpha_i) - 0.5)^2 over every gate."""
    total = 0.0
    count = 0
    for ct in range(2):
        for a in supernet.alpha[ct]:
            s = 1.0 / (1.0 + np.exp(-a.data))
            total += float(((s - 0.5) ** 2).sum())
            count += a.data.size
    return -total / count


def sample_alpha_delta(supernet, radius, rng):
    """Uniform box noise over every architecture parameter."""
    return [[rng.uniform(-radius, radius, size=a.data.shape)
             for a in supernet.alpha[ct]] for ct in range(2)]


def adversarial_alpha_delta(supernet, loss_fn, ds, idx, radius, ascent_steps=3):
    """Projected sign-ascent on the training loss over the perturbation box."""
    delta = [[np.zeros(a.data.shape) for a in supernet.alpha[ct]] for ct in range(2)]
    lr = radius / ascent_steps if radius > 0 else 0.0
    for _ in range(ascent_steps):
        shift = [[T.Tensor(d, requires_grad=True) for d in row] for row in delta]
        with T.Tape() as tape:
            loss = loss_fn_with_shift(supernet, loss_fn, ds.inputs[idx],
                                      ds.labels[idx], idx, shift)
        tape.backward(loss)
        for ct in range(2):
            for e, s in enumerate(shift[ct]):
                g = s.grad if s.grad is not None else 0.0
                delta[ct][e] = np.clip(delta[ct][e] + lr * np.sign(g), -radius, radius)
        for p in supernet.parameters():
            p.grad = None
    return delta


def loss_at_delta(supernet, loss_fn, ds, idx, delta):
    """Training-loss value at alpha + delta (no updates)."""
    shift = [[T.Tensor(d) for d in row] for row in delta]
    return float(loss_fn_with_shift(supernet, loss_fn, ds.inputs[idx], ds.labels[idx],
                                    idx, shift).data)


def smoothdarts_search(config, dataset, seed=0):
    """darts with the weight step taken at a perturbed alpha (uniform box
    noise, or a 3-step ascent for the adversarial variant)."""
    delta_rng = rng_from(seed, "delta")
    radius = config.radius

    def w_step(supernet, loss_fn, ds, idx, w_opt, rng, warm=False):
        if radius == 0.0 or warm:
            delta = None
        elif config.perturb == "adversarial":
            delta = adversarial_alpha_delta(supernet, loss_fn, ds, idx, radius)
        else:
            delta = sample_alpha_delta(supernet, radius, delta_rng)
        shift = None if delta is None else \
            [[T.Tensor(d) for d in row] for row in delta]
        _plain_w_step(supernet, loss_fn, ds, idx, w_opt, rng, warm=warm,
                      alpha_shift=shift)

    return _run_differentiable(config, dataset, seed, _plain_alpha_step, w_step)


# ---------------------------------------------------------------------------
# non-differentiable family


ARCH_GENES = 2 * N_NODES * 2 * 2  # 2 cell types x 4 nodes x 2 edges x (op, src)
_NON_NONE_OPS = OP_IDS[1:]


def arch_bounds():
    """Per-gene upper bounds; op genes range over the 7 non-none operations."""
    bounds = []
    for _ct in range(2):
        for node in range(N_NODES):
            for _edge in range(2):
                bounds.append(len(_NON_NONE_OPS))
                bounds.append(node + 2)
    return np.array(bounds, dtype=np.int64)


def genes_to_genotype(genes):
    cells = []
    i = 0
    for _ct in range(2):
        edges = []
        for node in range(N_NODES):
            for _e in range(2):
                op = _NON_NONE_OPS[int(genes[i]) - 1]
                src = int(genes[i + 1]) - 1
                edges.append((op, src))
                i += 2
        cells.append(tuple(edges))
    return Genotype(cells[0], cells[1])


def genotype_to_genes(genotype):
    genes = []
    for edges in (genotype.normal, genotype.reduction):
        for op, src in edges:
            genes.append(_NON_NONE_OPS.index(op) + 1)
            genes.append(src + 1)
    return tuple(genes)


class _CandidateScorer:
    """Train-and-score for sampled genotypes, memoized per genotype."""

    def __init__(self, config, dataset, seed):
        self.config = config
        self.train_ds, self.eval_ds = _split_halves(dataset, seed)
        self.seed = seed
        self.cache = {}

    def __call__(self, genotype):
        key = genotype.to_json()
        if key in self.cache:
            return self.cache[key]
        cfg = self.config
        model = instantiate_genotype(genotype, cfg.C, cfg.L, self.train_ds.n_classes,
                                     _in_channels(self.train_ds), seed=self.seed)
        adv = AdversarialConfig(eps=cfg.adv_eps, steps=7) if cfg.adv_train else None
        schedule = TrainSchedule(epochs=cfg.candidate_epochs, batch_size=cfg.batch_size,
                                 learning_rate=cfg.candidate_lr, optimizer="sgd_momentum",
                                 adversarial=adv)
        trained = train(model, self.train_ds, schedule, seed=self.seed)
        score = cfg.metric.score(trained.model, self.eval_ds)
        self.cache[key] = score
        return score

    def score_many(self, genotypes, jobs=1):
        fresh = []
        seen = set()
        for g in genotypes:
            key = g.to_json()
            if key not in self.cache and key not in seen:
                seen.add(key)
                fresh.append(g)
        for g, s in zip(fresh, parallel_map(self.__call__, fresh, jobs)):
            self.cache[g.to_json()] = s
        return [self.cache[g.to_json()] for g in genotypes]


def random_arch_search(config, dataset, n_samples=None, seed=0):
    """Uniform genotype samples, each trained short and scored by the metric."""
    n = config.n_samples if n_samples is None else n_samples
    if n < 1:
        raise ArgumentError(f"n_samples must be >= 1, got {n}")
    rng = rng_from(seed, "randarch")
    scorer = _CandidateScorer(config, dataset, seed)
    genotypes = [random_genotype(rng) for _ in range(n)]
    scores = scorer.score_many(genotypes, config.jobs)
    trace = [ArchTraceRow(i, np.nan, max(scores[:i + 1])) for i in range(n)]
    return genotypes[int(np.argmax(scores))], trace


def de_arch_search(config, dataset, pop=None, gens=None, seed=0, F=0.5, CR=0.9):
    """DE over the integer genotype encoding, maximizing the metric score."""
    pop = config.pop if pop is None else pop
    gens = config.gens if gens is None else gens
    if pop < 4:
        raise ArgumentError(f"DE needs pop >= 4, got {pop}")
    bounds = arch_bounds()
    rng = rng_from(seed, "dearch")
    scorer = _CandidateScorer(config, dataset, seed)
    positions = rng.uniform(1.0, bounds + 1.0 - 1e-9, size=(pop, len(bounds)))

    def to_genotype(pos):
        genes = np.clip(np.floor(pos + 0.5), 1, bounds).astype(np.int64)
        return genes_to_genotype(genes)

    genotypes = [to_genotype(p) for p in positions]
    fitness = scorer.score_many(genotypes, config.jobs)
    trace = [ArchTraceRow(0, np.nan, float(np.max(fitness)))]
    for gen in range(1, gens + 1):
        children = []
        for i in range(pop):
            others = [j for j in range(pop) if j != i]
            r1, r2, r3 = rng.choice(others, size=3, replace=False)
            v = positions[r1] + F * (positions[r2] - positions[r3])
            mask = rng.random(len(bounds)) <= CR
            mask[int(rng.integers(0, len(bounds)))] = True
            u = np.where(mask, v, positions[i])
            children.append(np.clip(u, 1.0, bounds.astype(np.float64)))
        child_genotypes = [to_genotype(c) for c in children]
        child_fitness = scorer.score_many(child_genotypes, config.jobs)
        for i in range(pop):
            if child_fitness[i] > fitness[i]:  # maximize robustness
                positions[i] = children[i]
                genotypes[i] = child_genotypes[i]
                fitness[i] = child_fitness[i]
        trace.append(ArchTraceRow(gen, np.nan, float(np.max(fitness))))
    return genotypes[int(np.argmax(fitness))], trace


def ws_random_search(config, dataset, train_epochs=None, n_eval=None, seed=0):
    """Single-path uniformly-sampled supernet training, then shared-weight
    scoring of n_eval sampled genotypes."""
    epochs = config.epochs if train_epochs is None else train_epochs
    n_eval = config.n_eval if n_eval is None else n_eval
    train_ds, eval_ds = _split_halves(dataset, seed)
    supernet = build_supernet("darts", config.C, config.L, dataset.n_classes,
                              _in_channels(dataset), seed=seed)
    w_opt = SGDMomentum(supernet.weight_parameters(), config.w_lr,
                        momentum=config.w_momentum, weight_decay=config.w_weight_decay)
    rng = rng_from(seed, "wsrandom")
    from .losses import cross_entropy_mean

    for epoch in range(epochs):
        for idx in _batches(len(train_ds), config.batch_size, rng):
            genotype = random_genotype(rng)
            path = _PathModel(supernet, genotype)
            xb, yb = train_ds.inputs[idx], train_ds.labels[idx]
            if config.adv_train and config.adv_eps > 0:
                xb = pgd_batch(path, xb, yb, config.adv_eps, 7)
            with T.Tape() as tape:
                loss = cross_entropy_mean(path.apply(T.Tensor(xb), train=True), yb)
            tape.backward(loss)
            for p in supernet.arch_parameters():
                p.grad = None
            w_opt.step()
            w_opt.zero_grad()

    eval_slice = eval_ds.subset(np.arange(min(64, len(eval_ds))))
    best = None
    trace = []
    for i in range(n_eval):
        genotype = random_genotype(rng)
        score = config.metric.score(_PathModel(supernet, genotype), eval_slice)
        if best is None or score > best[0]:
            best = (score, genotype)
        trace.append(ArchTraceRow(i, np.nan, best[0]))
    return best[1], trace


# ---------------------------------------------------------------------------
# dispatch


def run_search(config, dataset, seed=0):
    """Run the configured strategy; returns (genotype, trace)."""
    if config.strategy in ("darts", "pcdarts", "nasp", "fairdarts", "smoothdarts"):
        fn = {"darts": darts_search, "pcdarts": pcdarts_search, "nasp": nasp_search,
              "fairdarts": fairdarts_search, "smoothdarts": smoothdarts_search}
        genotype, trace, _ = fn[config.strategy](config, dataset, seed)
        return genotype, trace
    if config.strategy == "random":
        return random_arch_search(config, dataset, seed=seed)
    if config.strategy == "de":
        return de_arch_search(config, dataset, seed=seed)
    return ws_random_search(config, dataset, seed=seed)
