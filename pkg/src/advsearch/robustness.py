"""Robustness evaluation: accuracy under noise sources, input-Jacobian and
input-Hessian Frobenius norms, and the composite search losses built from
them.

The quantified metrics are reported exactly (per-class backward loop for the
Jacobian, Hutchinson probes over gradient differences for the Hessian). The
differentiable regularizer variants used inside architecture search replace
gradients-of-gradients with central-difference surrogates over tape-recorded
forward passes: coordinate probes make the Jacobian term exact for linear
models and O(h^2)-accurate otherwise, with plain reverse mode sufficing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackScheme, NormFamily, predict, run_scheme
from .data import CorruptionSpec, ResamplePipeline, corrupt_dataset, system_noise_dataset
from .errors import ArgumentError, ConfigError
from .gradcheck import grad_input
from .losses import attack_loss, cross_entropy_mean
from .training import pgd_batch
from .util import rng_from

METRIC_KINDS = ("clean", "adversarial", "natural", "system", "jacobian", "hessian")

DEFAULT_CORRUPTIONS = tuple(CorruptionSpec(k, 3) for k in
                            ("brightness", "contrast", "gaussian_blur",
                             "motion_blur", "gaussian_noise"))
DEFAULT_PIPELINES = (ResamplePipeline("nearest", "bilinear", 4),
                     ResamplePipeline("bilinear", "nearest", 4))


# ---------------------------------------------------------------------------
# noise sources and robust accuracy


class IdentitySource:
    name = "clean"

    def accuracy(self, model, dataset):
        return float((predict(model, dataset.inputs) == dataset.labels).mean())


class AttackSource:
    """Adversarial source; inputs regenerate against each model queried."""

    def __init__(self, attack="FGSM", eps=8.0 / 255.0, steps=7, scheme=None, seed=0):
        self.scheme = scheme
        self.attack = attack
        self.eps = eps
        self.steps = steps
        self.seed = seed
        if scheme is not None:
            self.name = "scheme"
        else:
            self.name = attack.lower()

    def accuracy(self, model, dataset):
        if self.scheme is not None:
            result, _ = run_scheme(model, dataset, self.scheme, seed=self.seed)
            return result.robust_acc
        if self.eps == 0.0:
            return IdentitySource().accuracy(model, dataset)
        if self.attack == "FGSM":
            g = grad_input(model, dataset.inputs, dataset.labels, "CE_P")
            x_adv = np.clip(dataset.inputs + self.eps * np.sign(g), 0.0, 1.0)
        elif self.attack == "PGD":
            x_adv = pgd_batch(model, dataset.inputs, dataset.labels, self.eps, self.steps)
        else:
            raise ConfigError(f"unknown named attack: {self.attack!r}")
        return float((predict(model, x_adv) == dataset.labels).mean())


class CorruptionSource:
    """Natural-noise source; model-independent, cached per dataset."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = seed
        self.name = f"{spec.kind}{spec.severity}"
        self._cache = {}

    def transformed(self, dataset):
        key = dataset.fingerprint()
        if key not in self._cache:
            self._cache[key] = corrupt_dataset(dataset, self.spec, self.seed)
        return self._cache[key]

    def accuracy(self, model, dataset):
        noisy = self.transformed(dataset)
        return float((predict(model, noisy.inputs) == noisy.labels).mean())


class SystemNoiseSource:
    def __init__(self, pipeline):
        self.pipeline = pipeline
        self.name = f"{pipeline.down}-{pipeline.up}{pipeline.intermediate_size}"
        self._cache = {}

    def transformed(self, dataset):
        key = dataset.fingerprint()
        if key not in self._cache:
            self._cache[key] = system_noise_dataset(dataset, self.pipeline)
        return self._cache[key]

    def accuracy(self, model, dataset):
        noisy = self.transformed(dataset)
        return float((predict(model, noisy.inputs) == noisy.labels).mean())


def robust_accuracy(model, dataset, source):
    """Accuracy on the source's transformed inputs (adversarial sources
    regenerate per model, natural/system sources are model-independent)."""
    return source.accuracy(model, dataset)


# ---------------------------------------------------------------------------
# quantified metrics


def jacobian_fnorm(model, x):
    """Mean over examples of ||J(x)||_F^2, exact via one backward per class."""
    x = np.asarray(x, dtype=np.float64)
    xt = T.Tensor(x, requires_grad=True)
    with T.Tape(watch=[xt]) as tape:
        logits = model.apply(xt, train=False)
    n, k = logits.data.shape
    if k > 16:
        raise ArgumentError(f"jacobian_fnorm: {k} classes exceed the 16-backward budget")
    if id(logits) not in tape._ids:
        return 0.0  # output never touched the input: identically zero Jacobian
    total = np.zeros(n)
    for c in range(k):
        xt.grad = None
        seed = np.zeros((n, k))
        seed[:, c] = 1.0
        tape.backward(logits, seed)
        total += (xt.grad.reshape(n, -1) ** 2).sum(axis=1)
    return float(total.mean())


def hessian_fnorm_from_grads(grad_fn, x, probes=8, h=1e-3, seed=0):
    """Hutchinson estimate of ||H||_F^2 from a per-example gradient callable."""
    if h <= 0:
        raise ArgumentError(f"h must be positive, got {h}")
    if probes < 1:
        raise ArgumentError(f"probes must be >= 1, got {probes}")
    x = np.asarray(x, dtype=np.float64)
    rng = rng_from(seed, "hessian")
    n = x.shape[0]
    total = np.zeros(n)
    for _ in range(probes):
        v = rng.choice([-1.0, 1.0], size=x.shape)
        hv = (grad_fn(x + h * v) - grad_fn(x - h * v)) / (2.0 * h)
        total += (hv.reshape(n, -1) ** 2).sum(axis=1)
    return float((total / probes).mean())


def hessian_fnorm_estimate(model, x, y, loss_id="CE_P", probes=8, h=1e-3, seed=0):
    """Estimate of ||H||_F^2 for the loss Hessian with respect to the input."""
    y = np.asarray(y, dtype=np.int64)
    return hessian_fnorm_from_grads(
        lambda xv: grad_input(model, xv, y, loss_id), x, probes, h, seed)


# ---------------------------------------------------------------------------
# composite search losses


class PlainLoss:
    kind = "clean"

    def __call__(self, model, x, y, idx=None, train=True):
        return cross_entropy_mean(model.apply(T.as_tensor(x), train), y)


class AdversarialLoss:
    """Clean CE plus gamma * CE on a batch attacked from the current model.

    The attacked batch regenerates every evaluation, so two calls under
    changed weights see different inputs; the attack itself is treated as
    data (no gradient through generation).
    """

    kind = "adversarial"

    def __init__(self, gamma=1.0, attack="FGSM", eps=None, steps=7, scheme=None,
                 norm=None):
        norm = norm or NormFamily()
        self.gamma = gamma
        self.scheme = scheme
        self.attack = attack
        self.steps = steps
        self.eps = norm.eps_max / 2.0 if eps is None else eps
        self.norm = norm

    def attacked_inputs(self, model, x, y):
        x = np.asarray(x, dtype=np.float64)
        if self.scheme is not None:
            from .attacks import run_attack_cell

            cur = x.copy()
            for i, cell in enumerate(self.scheme.cells):
                cur, _ = run_attack_cell(model, cur, x, y, cell, self.scheme.norm, seed=i)
            return cur
        if self.attack == "PGD":
            return pgd_batch(model, x, y, self.eps, self.steps)
        g = grad_input(model, x, y, "CE_P")
        return np.clip(x + self.eps * np.sign(g), 0.0, 1.0)

    def loss_given(self, model, x, y, x_adv, train=True):
        clean = cross_entropy_mean(model.apply(T.as_tensor(x), train), y)
        if self.gamma == 0.0:
            return clean
        adv = cross_entropy_mean(model.apply(T.Tensor(x_adv), train), y)
        return T.add(clean, T.scale(adv, self.gamma))

    def __call__(self, model, x, y, idx=None, train=True):
        if self.gamma == 0.0:
            x_adv = None
        else:
            with T.suspend_tape():  # the attack is data, not a taped op
                x_adv = self.attacked_inputs(model, x, y)
        return self.loss_given(model, x, y, x_adv, train)


class MixtureLoss:
    """CE on batches where a fixed fraction of examples use frozen noisy copies."""

    kind = "mixture"

    def __init__(self, dataset, corruptions=(), pipelines=(), fraction=0.5, seed=0):
        if not corruptions and not pipelines:
            raise ConfigError("mixture loss needs corruptions or pipelines")
        rng = rng_from(seed, "mixture")
        noisy = dataset.inputs.copy()
        sources = [CorruptionSource(c, seed) for c in corruptions]
        sources += [SystemNoiseSource(p) for p in pipelines]
        pick = rng.integers(0, len(sources), size=len(dataset))
        for si, src in enumerate(sources):
            sel = pick == si
            if sel.any():
                noisy[sel] = src.transformed(dataset).inputs[sel]
        self.noisy_inputs = noisy
        self.replace = rng.random(len(dataset)) < fraction

    def __call__(self, model, x, y, idx=None, train=True):
        if idx is not None:
            idx = np.asarray(idx, dtype=np.int64)
            x = np.asarray(x, dtype=np.float64).copy()
            swap = self.replace[idx]
            x[swap] = self.noisy_inputs[idx[swap]]
        return cross_entropy_mean(model.apply(T.Tensor(x), train), y)


class RegularizerLoss:
    """Clean CE plus gamma times a differentiable norm surrogate.

    jacobian: sum over probe directions v of ||(F(x+hv) - F(x-hv)) / 2h||^2,
    coordinate probes when the input is small (exact for linear models),
    fixed Rademacher probes otherwise. hessian: squared 4-point mixed
    differences of the per-example loss over fixed Rademacher pairs.
    """

    kind = "regularizer"

    def __init__(self, which="jacobian", gamma=1.0, probes=8, h=None, max_coord_dim=32,
                 seed=0):
        if which not in ("jacobian", "hessian"):
            raise ConfigError(f"unknown regularizer: {which!r}")
        self.which = which
        self.gamma = gamma
        self.probes = probes
        self.h = (1e-3 if which == "jacobian" else 0.05) if h is None else h
        self.max_coord_dim = max_coord_dim
        self.seed = seed
        self._probe_cache = {}

    def _probe_vectors(self, shape):
        d = int(np.prod(shape[1:]))
        key = shape[1:]
        if key not in self._probe_cache:
            if self.which == "jacobian" and d <= self.max_coord_dim:
                basis = np.eye(d).reshape((d,) + tuple(shape[1:]))
                self._probe_cache[key] = ("coords", basis)
            else:
                rng = rng_from(self.seed, "probes")
                count = self.probes * (2 if self.which == "hessian" else 1)
                vs = rng.choice([-1.0, 1.0], size=(count,) + tuple(shape[1:]))
                self._probe_cache[key] = ("rademacher", vs)
        mode, vs = self._probe_cache[key]
        return mode, [np.broadcast_to(v, shape) for v in vs]

    def _jacobian_surrogate(self, model, x, train):
        mode, probes = self._probe_vectors(x.shape)
        acc = None
        for v in probes:
            fp = model.apply(T.Tensor(x + self.h * v), train=False)
            fm = model.apply(T.Tensor(x - self.h * v), train=False)
            d = T.scale(T.sub(fp, fm), 1.0 / (2.0 * self.h))
            sq = T.reduce_sum(T.mul(d, d), axis=1)
            acc = sq if acc is None else T.add(acc, sq)
        if mode == "rademacher":
            acc = T.scale(acc, 1.0 / len(probes))
        return T.reduce_mean(acc)

    def _hessian_surrogate(self, model, x, y, train):
        _, probes = self._probe_vectors(x.shape)
        pairs = [(probes[2 * i], probes[2 * i + 1]) for i in range(len(probes) // 2)]
        base = attack_loss("CE_P", model.apply(T.Tensor(x), train=False), y)
        acc = None
        h = self.h
        for u, v in pairs:
            luv = attack_loss("CE_P", model.apply(T.Tensor(x + h * (u + v)), train=False), y)
            lu = attack_loss("CE_P", model.apply(T.Tensor(x + h * u), train=False), y)
            lv = attack_loss("CE_P", model.apply(T.Tensor(x + h * v), train=False), y)
            q = T.scale(T.add(T.sub(T.sub(luv, lu), lv), base), 1.0 / (h * h))
            sq = T.mul(q, q)
            acc = sq if acc is None else T.add(acc, sq)
        return T.reduce_mean(T.scale(acc, 1.0 / len(pairs)))

    def __call__(self, model, x, y, idx=None, train=True):
        x = np.asarray(x, dtype=np.float64)
        clean = cross_entropy_mean(model.apply(T.Tensor(x), train), y)
        if self.gamma == 0.0:
            return clean
        if self.which == "jacobian":
            reg = self._jacobian_surrogate(model, x, train)
        else:
            reg = self._hessian_surrogate(model, x, y, train)
        return T.add(clean, T.scale(reg, self.gamma))


def robust_loss(kind, gamma=1.0, **kwargs):
    """Composite loss factory: adversarial, mixture, or regularizer."""
    if kind == "adversarial":
        return AdversarialLoss(gamma=gamma, **kwargs)
    if kind == "mixture":
        return MixtureLoss(**kwargs)
    if kind == "regularizer":
        return RegularizerLoss(gamma=gamma, **kwargs)
    if kind == "clean":
        return PlainLoss()
    raise ConfigError(f"unknown robust loss kind: {kind!r}")


# ---------------------------------------------------------------------------
# metric wrapper used by architecture search


@dataclass
class RobustnessMetric:
    """One robustness evaluation family plus its parameters.

    score() is oriented so larger is better for every kind (norm metrics are
    negated), which is what population-based searchers maximize.
    """

    kind: str = "adversarial"
    attack: str = "FGSM"
    eps: float = 8.0 / 255.0
    steps: int = 7
    scheme: AttackScheme = None
    corruptions: tuple = ()
    pipelines: tuple = ()
    loss_id: str = "CE_P"
    probes: int = 8
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ConfigError(f"unknown metric kind: {self.kind!r}")
        if self.kind == "natural" and not self.corruptions:
            self.corruptions = DEFAULT_CORRUPTIONS
        if self.kind == "system" and not self.pipelines:
            self.pipelines = DEFAULT_PIPELINES

    def sources(self):
        if self.kind == "adversarial":
            return [AttackSource(self.attack, self.eps, self.steps, self.scheme, self.seed)]
        if self.kind == "natural":
            return [CorruptionSource(c, self.seed) for c in self.corruptions]
        if self.kind == "system":
            return [SystemNoiseSource(p) for p in self.pipelines]
        return [IdentitySource()]

    def score(self, model, dataset):
        if self.kind == "jacobian":
            return -jacobian_fnorm(model, dataset.inputs)
        if self.kind == "hessian":
            return -hessian_fnorm_estimate(model, dataset.inputs, dataset.labels,
                                           self.loss_id, self.probes, seed=self.seed)
        accs = [robust_accuracy(model, dataset, s) for s in self.sources()]
        return float(np.mean(accs))

    def build_loss(self, dataset):
        """The differentiable composite loss this metric induces."""
        if self.kind == "clean":
            return PlainLoss()
        if self.kind == "adversarial":
            return AdversarialLoss(gamma=self.gamma, attack=self.attack,
                                   eps=self.eps / 2.0 if self.scheme is None else None,
                                   steps=self.steps, scheme=self.scheme)
        if self.kind in ("natural", "system"):
            return MixtureLoss(dataset, corruptions=self.corruptions,
                               pipelines=self.pipelines, fraction=0.5, seed=self.seed)
        return RegularizerLoss(which=self.kind, gamma=self.gamma, probes=self.probes,
                               seed=self.seed)


# ---------------------------------------------------------------------------
# reports


@dataclass
class RobustnessReport:
    clean_acc: float
    source_accs: dict = field(default_factory=dict)
    jacobian_fnorm: float = 0.0
    hessian_fnorm_sq: float = 0.0
    model_fingerprint: str = ""

    def to_json(self):
        # fixed key order is part of the report contract
        payload = {
            "clean_acc": self.clean_acc,
            "source_accs": {k: self.source_accs[k] for k in sorted(self.source_accs)},
            "jacobian_fnorm": self.jacobian_fnorm,
            "hessian_fnorm_sq": self.hessian_fnorm_sq,
            "model_fingerprint": self.model_fingerprint,
        }
        return json.dumps(payload, indent=2)


def robustness_report(model, dataset, sources=(), hessian_probes=4, seed=0):
    accs = {}
    for src in sources:
        accs[src.name] = robust_accuracy(model, dataset, src)
    return RobustnessReport(
        clean_acc=IdentitySource().accuracy(model, dataset),
        source_accs=accs,
        jacobian_fnorm=jacobian_fnorm(model, dataset.inputs),
        hessian_fnorm_sq=hessian_fnorm_estimate(
            model, dataset.inputs, dataset.labels, probes=hessian_probes, seed=seed),
        model_fingerprint=model.fingerprint(),
    )
