"""Attack operators, cell execution, and scheme chaining under a global budget.

An attack cell is one (operator, loss, magnitude index, iteration index,
restart) unit; schemes chain up to three cells, each starting from the
previous cell's output, with every emitted example kept inside the global
eps_max ball of the original input and inside [0, 1].
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError
from .gradcheck import grad_input
from .losses import LOSS_IDS, attack_loss
from .util import rng_from

LINF_OPS = ("FGSM", "PGD", "CW", "MT", "MI", "MomentumIterative")
L2_OPS = ("MI", "PGD", "CW", "MT", "MomentumIterative")

N_GRID = 8
MAX_STEPS = 50
MAX_CELLS = 3

_MOMENTUM = 1.0  # decay for the momentum-accumulator attacks


@dataclass(frozen=True)
class NormFamily:
    family: str = "Linf"
    eps_max: float = 8.0 / 255.0

    def __post_init__(self):
        if self.family not in ("Linf", "L2"):
            raise ConfigError(f"unknown norm family: {self.family!r}")
        if self.eps_max <= 0:
            raise ArgumentError(f"eps_max must be positive, got {self.eps_max}")

    @property
    def ops(self):
        return LINF_OPS if self.family == "Linf" else L2_OPS


def default_norm(family):
    return NormFamily("Linf") if family == "Linf" else NormFamily("L2", 0.5)


@dataclass(frozen=True)
class AttackCell:
    op: str
    loss: str = "CE_P"
    eps_idx: int = N_GRID
    steps_idx: int = 1
    restart: bool = False

    def __post_init__(self):
        if not 1 <= self.eps_idx <= N_GRID:
            raise ArgumentError(f"eps_idx must be 1..{N_GRID}, got {self.eps_idx}")
        if not 1 <= self.steps_idx <= N_GRID:
            raise ArgumentError(f"steps_idx must be 1..{N_GRID}, got {self.steps_idx}")
        if self.loss not in LOSS_IDS:
            raise ConfigError(f"unknown loss id: {self.loss!r}")


@dataclass(frozen=True)
class AttackScheme:
    cells: tuple
    norm: NormFamily

    def __post_init__(self):
        if not 1 <= len(self.cells) <= MAX_CELLS:
            raise ArgumentError(f"schemes chain 1..{MAX_CELLS} cells, got {len(self.cells)}")
        for cell in self.cells:
            if cell.op not in self.norm.ops:
                raise ConfigError(f"operator {cell.op!r} unavailable for {self.norm.family}")
        object.__setattr__(self, "cells", tuple(self.cells))


@dataclass
class EvalResult:
    robust_acc: float
    cost_units: int
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.robust_acc <= 1.0:
            raise ArgumentError(f"robust_acc out of [0, 1]: {self.robust_acc}")
        if self.cost_units < 0:
            raise ArgumentError("cost_units must be >= 0")


# ---------------------------------------------------------------------------
# grid decoding and projection


def decode_grid(idx, axis, norm):
    """Map a 1..8 gene index to a magnitude or an iteration count.

    Magnitudes split the global budget into 8 uniform parts; iterations split
    1..50 into 8 parts with round-half-up, giving {6,13,19,25,31,38,44,50}.
    """
    if not 1 <= idx <= N_GRID:
        raise ArgumentError(f"grid index must be 1..{N_GRID}, got {idx}")
    if axis == "eps":
        return idx * norm.eps_max / N_GRID
    if axis == "steps":
        return int(np.floor(idx * MAX_STEPS / N_GRID + 0.5))
    raise ArgumentError(f"unknown grid axis: {axis!r}")


def _flat_norms(x, order):
    flat = x.reshape(x.shape[0], -1)
    if order == 1:
        return np.abs(flat).sum(axis=1)
    return np.sqrt((flat * flat).sum(axis=1))


def project(x_adv, x_orig, norm, eps):
    """Project onto the eps ball around x_orig (per example), then clip to [0, 1]."""
    if x_adv.shape != x_orig.shape:
        raise ArgumentError(f"project: shape mismatch {x_adv.shape} vs {x_orig.shape}")
    if eps < 0:
        raise ArgumentError(f"project: eps must be >= 0, got {eps}")
    if norm.family == "Linf":
        out = np.clip(x_adv, x_orig - eps, x_orig + eps)
    else:
        delta = x_adv - x_orig
        norms = _flat_norms(delta, 2)
        factor = np.ones_like(norms)
        outside = norms > eps
        factor[outside] = eps / norms[outside]
        out = x_orig + delta * factor.reshape((-1,) + (1,) * (x_adv.ndim - 1))
    return np.clip(out, 0.0, 1.0)


def predict(model, x):
    return model.apply(T.Tensor(np.asarray(x, dtype=np.float64))).data.argmax(axis=1)


def _loss_values(model, x, y, loss_id):
    logits = model.apply(T.Tensor(x))
    return attack_loss(loss_id, logits, y).data


# ---------------------------------------------------------------------------
# single-cell execution


class _CostCounter:
    def __init__(self):
        self.units = 0

    def grad(self, model, x, y, loss_id):
        self.units += x.shape[0]
        return grad_input(model, x, y, loss_id)


def _step_direction(g, family):
    if family == "Linf":
        return np.sign(g)
    norms = _flat_norms(g, 2).reshape((-1,) + (1,) * (g.ndim - 1))
    return g / (norms + 1e-12)


def _iterate(model, x_init, x_center, x_orig, y, loss_id, norm, eps_cell,
             steps, step, counter, variant, sign_flip=1.0, y_grad=None):
    """Shared iteration body for PGD/CW/MomentumIterative/MI.

    variant: "pgd" takes plain gradient steps; "momentum" accumulates
    L1-normalized gradients; "nesterov" evaluates the gradient at a lookahead
    point along the current momentum direction first. Every step projects
    onto the cell ball around x_center, then the global ball around x_orig.
    """
    if y_grad is None:
        y_grad = y
    family = norm.family
    x = x_init.copy()
    g_acc = np.zeros_like(x)
    for _ in range(steps):
        if variant == "nesterov":
            look = x + _MOMENTUM * step * _step_direction(g_acc, family)
            g = counter.grad(model, look, y_grad, loss_id)
        else:
            g = counter.grad(model, x, y_grad, loss_id)
        g = sign_flip * g
        if variant == "pgd":
            direction = _step_direction(g, family)
        else:
            l1 = _flat_norms(g, 1).reshape((-1,) + (1,) * (g.ndim - 1))
            g_acc = _MOMENTUM * g_acc + g / (l1 + 1e-12)
            direction = _step_direction(g_acc, family)
        x = x + step * direction
        x = project(x, x_center, norm, eps_cell)
        x = project(x, x_orig, norm, norm.eps_max)
    return x


def _random_init(x_start, x_orig, family, eps_cell, eps_max, rng):
    if family == "Linf":
        x = x_start + rng.uniform(-eps_cell, eps_cell, size=x_start.shape)
    else:
        direction = rng.standard_normal(x_start.shape)
        norms = _flat_norms(direction, 2).reshape((-1,) + (1,) * (x_start.ndim - 1))
        radius = rng.uniform(0.0, 1.0, size=(x_start.shape[0],)) ** (1.0 / x_start[0].size)
        radius = (radius * eps_cell).reshape((-1,) + (1,) * (x_start.ndim - 1))
        x = x_start + direction / (norms + 1e-12) * radius
    x = project(x, x_start, NormFamily(family, eps_cell), eps_cell)
    return project(x, x_orig, NormFamily(family, eps_max), eps_max)


def run_attack_cell(model, x_start, x_orig, y, cell, norm, seed=0, step_size=None,
                    steps_override=None):
    """Execute one attack cell; returns (x_adv, gradient evaluations consumed).

    With restart=True the attack runs twice, once from a random point inside
    the cell ball and once from x_start, keeping the per-example run with the
    strictly higher final cell loss. step_size and steps_override bypass the
    grid defaults (iterative step eps/4, decoded iteration count).
    """
    if cell.op not in norm.ops:
        raise ConfigError(f"operator {cell.op!r} unavailable for {norm.family}")
    x_start = np.asarray(x_start, dtype=np.float64)
    x_orig = np.asarray(x_orig, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    family = norm.family
    eps_cell = decode_grid(cell.eps_idx, "eps", norm)
    steps = decode_grid(cell.steps_idx, "steps", norm) if steps_override is None \
        else int(steps_override)
    eps_max = norm.eps_max
    counter = _CostCounter()
    cell_loss = "Hinge_L" if cell.op == "CW" else cell.loss

    def run_from(x_init):
        if cell.op == "FGSM":
            g = counter.grad(model, x_init, y, cell_loss)
            x = np.clip(x_init + eps_cell * np.sign(g), 0.0, 1.0)
            return project(x, x_orig, norm, eps_max)
        step = eps_cell / 4.0 if step_size is None else step_size
        if cell.op in ("PGD", "CW"):
            return _iterate(model, x_init, x_start, x_orig, y, cell_loss, norm,
                            eps_cell, steps, step, counter, "pgd")
        if cell.op == "MomentumIterative":
            return _iterate(model, x_init, x_start, x_orig, y, cell_loss, norm,
                            eps_cell, steps, step, counter, "momentum")
        if cell.op == "MI":
            return _iterate(model, x_init, x_start, x_orig, y, cell_loss, norm,
                            eps_cell, steps, step, counter, "nesterov")
        # MT: targeted sweeps over the top-(K-1) wrong classes, even budget split
        logits = model.apply(T.Tensor(x_init)).data
        k = logits.shape[1]
        order = np.argsort(-logits, axis=1)
        wrong_order = order[order != y[:, None]].reshape(len(y), k - 1)
        n_targets = k - 1
        per_target = max(1, steps // n_targets)
        best_x = None
        best_val = None
        for t in range(n_targets):
            targets = wrong_order[:, t]
            x_t = _iterate(model, x_init, x_start, x_orig, y, cell_loss, norm,
                           eps_cell, per_target, step, counter, "pgd",
                           sign_flip=-1.0, y_grad=targets)
            val = _loss_values(model, x_t, y, cell_loss)
            if best_x is None:
                best_x, best_val = x_t, val
            else:
                better = val > best_val
                best_x[better] = x_t[better]
                best_val = np.maximum(best_val, val)
        return best_x

    starts = []
    if cell.restart:
        rng = rng_from(seed, "restart")
        starts.append(_random_init(x_start, x_orig, family, eps_cell, eps_max, rng))
    starts.append(x_start)

    best_x = None
    best_val = None
    for x_init in starts:
        x_out = run_from(x_init)
        val = _loss_values(model, x_out, y, cell_loss)
        if best_x is None:
            best_x, best_val = x_out, val
        else:
            better = val > best_val
            best_x[better] = x_out[better]
            best_val = np.maximum(best_val, val)
    return best_x, counter.units


# ---------------------------------------------------------------------------
# scheme chaining


def run_scheme(model, dataset, scheme, seed=0, return_examples=False):
    """Run the cells sequentially with early exit for fooled examples.

    An example counts as fooled once it is misclassified at any cell boundary
    (the clean input included); fooled examples skip remaining cells and stop
    accruing cost.
    """
    if len(dataset) == 0:
        raise ArgumentError("run_scheme: empty dataset")
    t0 = time.perf_counter()
    x_orig = dataset.inputs
    y = dataset.labels
    fooled = predict(model, x_orig) != y
    x_cur = x_orig.copy()
    cost = 0
    for i, cell in enumerate(scheme.cells):
        alive = np.flatnonzero(~fooled)
        if alive.size == 0:
            break
        x_adv, units = run_attack_cell(
            model, x_cur[alive], x_orig[alive], y[alive], cell, scheme.norm,
            seed=int(rng_from(seed, "cell", i).integers(0, 2**31)))
        cost += units
        x_cur[alive] = x_adv
        fooled[alive] |= predict(model, x_adv) != y[alive]
    result = EvalResult(
        robust_acc=float(1.0 - fooled.mean()),
        cost_units=int(cost),
        wall_time_s=time.perf_counter() - t0,
    )
    if return_examples:
        return result, fooled, x_cur
    return result, fooled


# ---------------------------------------------------------------------------
# scheme JSON (the visualization-table format)


def _magnitude_str(eps):
    scaled = eps * 255.0
    if abs(scaled - round(scaled)) < 1e-9:
        return f"{int(round(scaled))}/255"
    return f"{eps:.12g}"


def scheme_to_json(scheme):
    rows = []
    for cell in scheme.cells:
        rows.append({
            "A": f"{cell.op}-{scheme.norm.family}Attack",
            "L": None if cell.op == "CW" else cell.loss,
            "M": _magnitude_str(decode_grid(cell.eps_idx, "eps", scheme.norm)),
            # FGSM is a single step regardless of the iteration gene
            "I": 1 if cell.op == "FGSM" else decode_grid(cell.steps_idx, "steps", scheme.norm),
            "R": bool(cell.restart),
        })
    return json.dumps(rows, indent=2)


def _parse_magnitude(m):
    if isinstance(m, str) and "/" in m:
        num, den = m.split("/")
        return float(num) / float(den)
    return float(m)


_STEPS_GRID = {decode_grid(i, "steps", NormFamily()): i for i in range(1, N_GRID + 1)}


def scheme_from_json(text, eps_max=None):
    rows = json.loads(text)
    if not rows:
        raise ArgumentError("empty scheme")
    family = "Linf" if rows[0]["A"].endswith("LinfAttack") else "L2"
    norm = default_norm(family) if eps_max is None else NormFamily(family, eps_max)
    cells = []
    for row in rows:
        op = row["A"].split("-")[0]
        eps = _parse_magnitude(row["M"])
        eps_idx = int(round(eps * N_GRID / norm.eps_max))
        steps = int(row["I"])
        if op == "FGSM":
            steps_idx = 1  # single-step by definition; the gene is not serialized
        elif steps in _STEPS_GRID:
            steps_idx = _STEPS_GRID[steps]
        else:
            raise ArgumentError(f"iteration count {steps} is not on the search grid")
        cells.append(AttackCell(
            op=op,
            loss=row.get("L") or "CE_P",
            eps_idx=min(max(eps_idx, 1), N_GRID),
            steps_idx=steps_idx,
            restart=bool(row.get("R", False)),
        ))
    return AttackScheme(tuple(cells), norm)


def save_scheme(scheme, path):
    with open(path, "w") as f:
        f.write(scheme_to_json(scheme) + "\n")


def load_scheme(path, eps_max=None):
    with open(path) as f:
        return scheme_from_json(f.read(), eps_max)
