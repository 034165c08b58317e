"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured value (run with -s or -v to see them). Tolerances are pinned
here, not configurable."""

import json
import time

import numpy as np
import pytest

from advsearch import tensor as T
from advsearch.arch_search import (SearchConfig, _CandidateScorer, darts_search,
                                   de_arch_search, random_arch_search, run_search)
from advsearch.attacks import (AttackCell, AttackScheme, NormFamily, decode_grid,
                               predict, run_attack_cell, run_scheme)
from advsearch.attack_search import (Evaluator, SearchSpace, brute_force_oracle,
                                     crowding_distance, de_search, decode,
                                     hypervolume_2d, local_search, nondominated_sort,
                                     nsga2_search, pso_search, random_genome,
                                     random_search_attacks)
from advsearch.data import make_shapes_dataset, make_spirals_dataset
from advsearch.gradcheck import finite_diff_check
from advsearch.harness import Ledger, run_experiment
from advsearch.losses import LOSS_IDS
from advsearch.models import (Genotype, OP_IDS, build_cnn, build_mlp,
                              instantiate_genotype, random_genotype)
from advsearch.robustness import (AttackSource, RobustnessMetric,
                                  hessian_fnorm_from_grads, jacobian_fnorm,
                                  robust_loss)
from advsearch.training import AdversarialConfig, TrainSchedule, train
from advsearch.util import rng_from


def _pass(criterion, detail):
    print(f"[acceptance] criterion {criterion}: PASS ({detail})")


def _toy_cnn(seed=4, n_classes=3, noise=0.05, epochs=30):
    ds = make_shapes_dataset(10, 8, n_classes, noise, seed=seed)
    model = train(build_cnn(4, n_classes, seed=0), ds,
                  TrainSchedule(epochs=epochs, learning_rate=0.02, optimizer="adam"),
                  seed=0).model
    return model, ds


def _adv_cnn(seed, n_classes=5, noise=0.1, eps=0.05, epochs=10, n_per_class=8,
             channels=6):
    ds = make_shapes_dataset(n_per_class, 8, n_classes, noise, seed=seed)
    model = train(build_cnn(channels, n_classes, seed=seed), ds,
                  TrainSchedule(epochs=epochs, learning_rate=0.02, optimizer="adam",
                                adversarial=AdversarialConfig(eps=eps, steps=7)),
                  seed=seed).model
    return model, ds


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness


@pytest.mark.slow
def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    rng = rng_from(101, "models")
    worst = 0.0
    n_models = 0
    # 85 random MLPs
    for i in range(85):
        k = int(rng.integers(3, 6))
        d = int(rng.integers(4, 9))
        hidden = int(rng.integers(4, 10))
        model = build_mlp([d, hidden, k], seed=int(rng.integers(0, 10_000)))
        x = rng.uniform(-2.0, 2.0, size=(2, d))
        y = rng.integers(0, k, size=2)
        loss_id = LOSS_IDS[i % len(LOSS_IDS)]
        err = finite_diff_check(model, x, y, loss_id, h=1e-5)
        worst = max(worst, err)
        assert err <= 1e-4, (i, loss_id, err)
        n_models += 1
    # 15 cell networks on small images
    for i in range(15):
        genotype = random_genotype(rng)
        model = instantiate_genotype(genotype, 4, 2, 3, 1, seed=int(rng.integers(0, 10_000)))
        x = rng.uniform(0.0, 1.0, size=(1, 1, 6, 6))
        y = rng.integers(0, 3, size=1)
        loss_id = LOSS_IDS[i % len(LOSS_IDS)]
        err = finite_diff_check(model, x, y, loss_id, h=1e-5)
        worst = max(worst, err)
        assert err <= 1e-4, (i, loss_id, err)
        n_models += 1
    assert n_models == 100

    # all three robust_loss kinds, gradients wrt parameters on tiny models
    def param_fd(loss_value_fn, taped_fn, params, tol=1e-4):
        for p in params:
            p.grad = None
        taped_fn()
        worst_local = 0.0
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat, gflat = p.data.reshape(-1), analytic.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + 1e-5
                hi = loss_value_fn()
                flat[j] = orig - 1e-5
                lo = loss_value_fn()
                flat[j] = orig
                num = (hi - lo) / 2e-5
                worst_local = max(worst_local, abs(gflat[j] - num) / (abs(gflat[j]) + 1e-8))
        assert worst_local <= tol, worst_local
        return worst_local

    spiral = make_spirals_dataset(12, 1.0, 0.02, seed=0)
    x, y = spiral.inputs[:6], spiral.labels[:6]

    # adversarial kind: check against the frozen attacked batch (the attack
    # itself is data generation, outside the differentiated computation)
    adv = robust_loss("adversarial", gamma=1.0, eps=0.03)
    model = build_mlp([2, 4, 2], seed=1)
    x_adv = adv.attacked_inputs(model, x, y)

    def run_adv_tape():
        with T.Tape() as tape:
            out = adv.loss_given(model, x, y, x_adv, train=False)
        tape.backward(out)
    worst = max(worst, param_fd(
        lambda: float(adv.loss_given(model, x, y, x_adv, train=False).data),
        run_adv_tape, model.parameters()))

    from advsearch.data import CorruptionSpec

    shapes = make_shapes_dataset(2, 8, 3, 0.05, seed=2)
    flat_inputs = shapes.inputs.reshape(len(shapes), -1)
    mix_model = build_mlp([64, 5, 3], seed=2)
    mix = robust_loss("mixture", dataset=shapes,
                      corruptions=(CorruptionSpec("brightness", 2),), seed=0)
    mix.noisy_inputs = mix.noisy_inputs.reshape(len(shapes), -1)
    idx = np.arange(4)

    def run_mix_tape():
        with T.Tape() as tape:
            out = mix(mix_model, flat_inputs[:4], shapes.labels[:4], idx, train=False)
        tape.backward(out)
    worst = max(worst, param_fd(
        lambda: float(mix(mix_model, flat_inputs[:4], shapes.labels[:4], idx,
                          train=False).data),
        run_mix_tape, mix_model.parameters()))

    for which in ("jacobian", "hessian"):
        reg_model = build_mlp([3, 4, 3], seed=3)
        xr = rng.uniform(0.2, 0.8, size=(2, 3))
        yr = np.array([0, 1])
        reg = robust_loss("regularizer", gamma=1.0, which=which, probes=2)

        def run_reg_tape():
            with T.Tape() as tape:
                out = reg(reg_model, xr, yr, train=False)
            tape.backward(out)
        worst = max(worst, param_fd(
            lambda: float(reg(reg_model, xr, yr, train=False).data),
            run_reg_tape, reg_model.parameters(), tol=2e-4))

    elapsed = time.perf_counter() - t0
    assert elapsed <= 120.0, f"criterion 1 exceeded 2 min: {elapsed:.1f}s"
    _pass(1, f"100 models + 3 robust-loss kinds, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: budget invariant on 10,000 executions


@pytest.mark.slow
def test_c02_budget_invariant():
    t0 = time.perf_counter()
    rng = rng_from(202, "budget")
    model = build_mlp([16, 12, 3], seed=0)
    x = rng.uniform(0.0, 1.0, size=(100, 16))
    y = rng.integers(0, 3, size=100)
    from advsearch.data import Dataset

    ds = Dataset("budget", x, y, 3)
    checked = 0
    for s in range(100):
        family = "Linf" if s % 2 == 0 else "L2"
        norm = NormFamily(family) if family == "Linf" else NormFamily("L2", 0.5)
        space = SearchSpace.full(norm, k=3, restart=(s % 4 == 1))
        genome = random_genome(space, rng)
        scheme = decode(genome, space)
        _, _, x_adv = run_scheme(model, ds, scheme, seed=s, return_examples=True)
        delta = (x_adv - x).reshape(100, -1)
        if family == "Linf":
            norms = np.abs(delta).max(axis=1)
        else:
            norms = np.sqrt((delta ** 2).sum(axis=1))
        assert np.all(norms <= norm.eps_max + 1e-9), (s, norms.max())
        assert np.all((x_adv >= 0.0) & (x_adv <= 1.0)), s
        checked += 100
    assert checked == 10_000
    elapsed = time.perf_counter() - t0
    assert elapsed <= 300.0, f"criterion 2 exceeded 5 min: {elapsed:.1f}s"
    _pass(2, f"10,000 executions inside the budget, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: oracle equivalence on the 16-genome space


@pytest.mark.slow
def test_c03_oracle_equivalence():
    t0 = time.perf_counter()
    model, ds = _toy_cnn()
    eval_ds = ds.subset(np.arange(18))
    norm = NormFamily("Linf", 0.05)
    space = SearchSpace(norm=norm, ops=("FGSM", "PGD"), losses=("CE_P", "Hinge_L"),
                        eps_choices=(2, 8), steps_choices=(1, 2), k=1)
    table, best = brute_force_oracle(space, model, eval_ds, seed=0)
    assert len(table) == 16
    target = best[1].robust_acc
    searchers = {
        "de": lambda seed: de_search(model, eval_ds, norm, pop=8, gens=3, seed=seed,
                                     space=space)[0],
        "pso": lambda seed: pso_search(model, eval_ds, norm, pop=8, gens=3, seed=seed,
                                       space=space)[0],
        "local": lambda seed: local_search(model, eval_ds, norm, iters=4, neigh=16,
                                           seed=seed, space=space)[0],
        "random": lambda seed: random_search_attacks(model, eval_ds, norm, budget=32,
                                                     seed=seed, space=space)[0],
    }
    ev = Evaluator(model, eval_ds, space, seed=0)
    for name, fn in searchers.items():
        for seed in range(5):
            genome = fn(seed)
            acc = ev(genome).robust_acc
            assert acc == pytest.approx(target, abs=1e-12), (name, seed, acc, target)
    elapsed = time.perf_counter() - t0
    assert elapsed <= 300.0, f"criterion 3 exceeded 5 min: {elapsed:.1f}s"
    _pass(3, f"4 searchers x 5 seeds all reach oracle optimum {target:.3f}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: FGSM / single-step-PGD identity


@pytest.mark.slow
def test_c04_fgsm_pgd_identity():
    rng = rng_from(404, "identity")
    for case in range(100):
        d = int(rng.integers(3, 8))
        k = int(rng.integers(3, 6))
        if case % 2 == 0:
            model = build_mlp([d, int(rng.integers(4, 8)), k],
                              seed=int(rng.integers(0, 10_000)))
        else:
            class Linear:
                def __init__(self, w):
                    self.w = T.Tensor(w, requires_grad=True)

                def apply(self, xv, train=False):
                    return T.matmul(T.as_tensor(xv), self.w)

            model = Linear(rng.normal(size=(d, k)))
        x = rng.uniform(0.1, 0.9, size=(2, d))
        y = rng.integers(0, k, size=2)
        eps_idx = int(rng.integers(1, 9))
        norm = NormFamily("Linf", float(rng.uniform(0.01, 0.2)))
        eps = decode_grid(eps_idx, "eps", norm)
        fgsm, _ = run_attack_cell(model, x, x, y, AttackCell("FGSM", "CE_P", eps_idx, 1),
                                  norm)
        pgd, _ = run_attack_cell(model, x, x, y, AttackCell("PGD", "CE_P", eps_idx, 1),
                                 norm, step_size=eps, steps_override=1)
        assert np.array_equal(fgsm, pgd), case
    _pass(4, "100 seeded cases bit-for-bit identical")


# ---------------------------------------------------------------------------
# criterion 5: NSGA-II machinery


@pytest.mark.slow
def test_c05_nsga2_machinery():
    ranks = nondominated_sort([(1, 3), (2, 2), (3, 1), (2, 3), (3, 3)])
    assert ranks.tolist() == [0, 0, 0, 1, 2]
    dist = crowding_distance([(1, 3), (2, 2), (3, 1)])
    assert np.isinf(dist[0]) and np.isinf(dist[2])
    assert dist[1] == pytest.approx(2.0)

    model, ds = _toy_cnn()
    eval_ds = ds.subset(np.arange(18))
    norm = NormFamily("Linf", 0.05)
    space = SearchSpace(norm=norm, ops=("FGSM", "PGD"), losses=("CE_P", "Hinge_L"),
                        eps_choices=(2, 8), steps_choices=(1, 2), k=1)
    archive, _, _ = nsga2_search(model, eval_ds, norm, pop=8, gens=2, seed=0, space=space)
    assert archive.check_invariants()
    _pass(5, "hand-derived ranks/crowding exact, front invariants hold")


# ---------------------------------------------------------------------------
# criterion 6: DE matches or beats the manual attack baselines (2 of 3 seeds)


@pytest.mark.slow
def test_c06_de_beats_manual_baselines():
    t0 = time.perf_counter()
    wins = 0
    details = []
    for seed in range(3):
        model, ds = _adv_cnn(seed)
        eval_ds = ds.subset(np.arange(32))
        norm = NormFamily("Linf", 0.15)
        clean_wrong = predict(model, eval_ds.inputs) != eval_ds.labels
        baselines = {}
        for name, cell, steps_override in (
            ("FGSM", AttackCell("FGSM", "CE_P", 8, 1), None),
            ("PGD7", AttackCell("PGD", "CE_P", 8, 1), 7),
            ("CW50", AttackCell("CW", "CE_P", 8, 8), None),
            ("MomentumIterative50", AttackCell("MomentumIterative", "CE_P", 8, 8), None),
        ):
            if steps_override is not None:
                x_adv, _ = run_attack_cell(model, eval_ds.inputs, eval_ds.inputs,
                                           eval_ds.labels, cell, norm,
                                           steps_override=steps_override)
                fooled = clean_wrong | (predict(model, x_adv) != eval_ds.labels)
                baselines[name] = float(1.0 - fooled.mean())
            else:
                res, _ = run_scheme(model, eval_ds, AttackScheme((cell,), norm), seed=0)
                baselines[name] = res.robust_acc
        genome, _ = de_search(model, eval_ds, norm, pop=8, gens=3, seed=seed)
        de_acc = Evaluator(model, eval_ds, SearchSpace.full(norm), seed=seed)(genome).robust_acc
        best = min(baselines.values())
        wins += de_acc <= best
        details.append(f"s{seed}: DE {de_acc:.3f} vs best {best:.3f}")
    elapsed = time.perf_counter() - t0
    assert wins >= 2, details
    assert elapsed <= 900.0, f"criterion 6 exceeded 15 min: {elapsed:.1f}s"
    _pass(6, f"{wins}/3 seeds ({'; '.join(details)}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 7: NSGA-II front hypervolume vs random search at equal budget


@pytest.mark.slow
def test_c07_nsga2_hypervolume_vs_random():
    t0 = time.perf_counter()
    wins = 0
    details = []
    for seed in range(3):
        model, ds = _adv_cnn(seed, n_per_class=10)
        eval_ds = ds.subset(np.arange(48))
        norm = NormFamily("Linf", 0.15)
        space = SearchSpace.full(norm)
        archive, _, trace = nsga2_search(model, eval_ds, norm, pop=20, gens=5, seed=seed)
        budget = trace[-1].evals_used
        rng = rng_from(seed, "random")
        ev = Evaluator(model, eval_ds, space, seed=seed)
        sampled = [random_genome(space, rng) for _ in range(budget)]
        rand_pts = [(r.robust_acc, r.cost_units) for r in ev.evaluate_many(sampled)]
        nsga_pts = [(r.robust_acc, r.cost_units) for _, r in archive.fronts[0]]
        max_cost = max(c for _, c in rand_pts + nsga_pts)
        ref = (1.0 + 1e-9, max_cost + 1)
        hv_n = hypervolume_2d(nsga_pts, ref)
        hv_r = hypervolume_2d(rand_pts, ref)
        wins += hv_n >= hv_r
        details.append(f"s{seed}: {hv_n:.0f} vs {hv_r:.0f}")
    elapsed = time.perf_counter() - t0
    assert wins >= 2, details
    assert elapsed <= 600.0, f"criterion 7 exceeded 10 min: {elapsed:.1f}s"
    _pass(7, f"{wins}/3 seeds ({'; '.join(details)}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 8: metric oracles


@pytest.mark.slow
def test_c08_metric_oracles():
    rng = rng_from(808, "metrics")
    w = rng.normal(size=(6, 4))

    class Linear:
        def __init__(self, wv):
            self.w = T.Tensor(wv, requires_grad=True)

        def apply(self, xv, train=False):
            return T.matmul(T.as_tensor(xv), self.w)

    model = Linear(w)
    x = rng.uniform(size=(5, 6))
    jf = jacobian_fnorm(model, x)
    assert abs(jf - float(np.sum(w ** 2))) <= 1e-8

    a = np.array([1.0, 2.0])
    est = hessian_fnorm_from_grads(lambda xv: xv * a, np.zeros((1, 2)),
                                   probes=64, h=1e-3, seed=0)
    assert abs(est - 5.0) / 5.0 <= 0.10
    _pass(8, f"jacobian |err|={abs(jf - np.sum(w**2)):.1e}, hessian {est:.4f} vs 5")


# ---------------------------------------------------------------------------
# criterion 9: NAS sanity on the C=8/L=4 supernet + frozen darts regression


_FROZEN_DARTS_GENOTYPE = (
    '{"normal": [["dil_conv_3x3", 0], ["dil_conv_3x3", 1], ["dil_conv_5x5", 1], '
    '["sep_conv_5x5", 2], ["dil_conv_3x3", 2], ["dil_conv_5x5", 3], '
    '["sep_conv_5x5", 0], ["dil_conv_3x3", 2]], '
    '"reduction": [["sep_conv_3x3", 0], ["sep_conv_5x5", 1], ["skip_connect", 1], '
    '["avg_pool_3x3", 2], ["dil_conv_3x3", 1], ["avg_pool_3x3", 2], '
    '["dil_conv_5x5", 1], ["sep_conv_5x5", 3]]}'
)
_FROZEN_DARTS_VAL_LOSSES = [None, 0.9403707874, 0.8343764516, 0.7866078595]


@pytest.mark.slow
def test_c09_nas_sanity_and_frozen_darts_trace():
    t0 = time.perf_counter()
    ds = make_shapes_dataset(8, 8, 3, 0.05, seed=0)
    metric = RobustnessMetric(kind="adversarial", attack="FGSM", eps=0.05)
    for strategy in ("darts", "nasp", "fairdarts", "smoothdarts", "pcdarts",
                     "random", "de", "ws_random"):
        cfg = SearchConfig(strategy=strategy, metric=metric, epochs=2, warm_epochs=1,
                           C=8, L=4, batch_size=8, n_samples=2, pop=4, gens=1,
                           candidate_epochs=1, n_eval=3)
        genotype, trace = run_search(cfg, ds, seed=0)
        for edges in (genotype.normal, genotype.reduction):
            assert len(edges) == 8
            for i, (op, src) in enumerate(edges):
                assert op in OP_IDS and op != "none"
                assert 0 <= src < i // 2 + 2

    # frozen first-order regression: clean metric reduces to plain alternation
    reg_ds = make_shapes_dataset(8, 8, 3, 0.05, seed=11)
    cfg = SearchConfig(strategy="darts", metric=RobustnessMetric(kind="clean"),
                       epochs=4, warm_epochs=1, C=4, L=3, batch_size=8)
    genotype, trace, _ = darts_search(cfg, reg_ds, seed=17)
    assert genotype == Genotype.from_json(_FROZEN_DARTS_GENOTYPE)
    for row, frozen in zip(trace, _FROZEN_DARTS_VAL_LOSSES):
        if frozen is None:
            assert np.isnan(row.val_loss)
        else:
            assert row.val_loss == pytest.approx(frozen, abs=1e-6)
    elapsed = time.perf_counter() - t0
    assert elapsed <= 1200.0, f"criterion 9 exceeded 20 min: {elapsed:.1f}s"
    _pass(9, f"8 strategies valid on C=8/L=4 + frozen darts trace, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 10: directional circuit claims


@pytest.mark.slow
def test_c10a_de_arch_beats_random_arch():
    t0 = time.perf_counter()
    wins = 0
    details = []
    for seed in range(3):
        ds = make_shapes_dataset(12, 8, 4, 0.08, seed=seed)
        metric = RobustnessMetric(kind="adversarial", attack="FGSM", eps=0.08)
        cfg = SearchConfig(strategy="de", metric=metric, epochs=3, warm_epochs=1,
                           C=4, L=2, batch_size=8, candidate_epochs=5,
                           candidate_lr=0.05, adv_eps=0.03)
        g_de, _ = de_arch_search(cfg, ds, pop=8, gens=3, seed=seed)
        g_rs, _ = random_arch_search(cfg, ds, n_samples=32, seed=seed)
        scorer = _CandidateScorer(cfg, ds, seed)
        s_de, s_rs = scorer(g_de), scorer(g_rs)
        wins += s_de >= s_rs
        details.append(f"s{seed}: DE {s_de:.3f} vs random {s_rs:.3f}")
    elapsed = time.perf_counter() - t0
    assert wins >= 2, details
    _pass("10a", f"{wins}/3 seeds ({'; '.join(details)}), {elapsed:.1f}s")


@pytest.mark.slow
def test_c10b_circuit_defense_direction():
    t0 = time.perf_counter()
    wins = 0
    details = []
    for seed in range(3):
        ds = make_shapes_dataset(12, 8, 4, 0.08, seed=seed + 30)
        norm = NormFamily("Linf", 0.12)
        eval_ds = ds.subset(np.arange(32))
        src = train(build_cnn(6, 4, seed=seed), ds,
                    TrainSchedule(epochs=10, learning_rate=0.02, optimizer="adam",
                                  adversarial=AdversarialConfig(eps=0.05, steps=7)),
                    seed=seed).model
        genome, _ = random_search_attacks(src, eval_ds, norm, budget=14, seed=seed)
        scheme = decode(genome, SearchSpace.full(norm))

        def nas_winner(metric):
            cfg = SearchConfig(strategy="random", metric=metric, epochs=3,
                               warm_epochs=1, C=4, L=2, batch_size=8,
                               candidate_epochs=4, candidate_lr=0.05, adv_eps=0.05)
            geno, _ = random_arch_search(cfg, ds, n_samples=10, seed=seed)
            model = instantiate_genotype(geno, 4, 2, 4, 1, seed=seed)
            return train(model, ds,
                         TrainSchedule(epochs=12, learning_rate=0.05,
                                       adversarial=AdversarialConfig(eps=0.05, steps=7)),
                         seed=seed).model

        m_aaa = nas_winner(RobustnessMetric(kind="adversarial", scheme=scheme, seed=seed))
        m_fgsm = nas_winner(RobustnessMetric(kind="adversarial", attack="FGSM",
                                             eps=norm.eps_max))
        acc_aaa = AttackSource(scheme=scheme, seed=seed).accuracy(m_aaa, eval_ds)
        acc_fgsm = AttackSource(scheme=scheme, seed=seed).accuracy(m_fgsm, eval_ds)
        wins += acc_aaa >= acc_fgsm
        details.append(f"s{seed}: AAA {acc_aaa:.3f} vs FGSM {acc_fgsm:.3f}")
    elapsed = time.perf_counter() - t0
    assert wins >= 2, details
    _pass("10b", f"{wins}/3 seeds ({'; '.join(details)}), {elapsed:.1f}s")


@pytest.mark.slow
def test_c10c_circuit_attack_direction():
    t0 = time.perf_counter()
    wins = 0
    details = []
    for seed in range(3):
        ds = make_shapes_dataset(12, 8, 4, 0.08, seed=seed + 20)
        norm = NormFamily("Linf", 0.15)
        eval_ds = ds.subset(np.arange(32))
        robust_src = train(build_cnn(6, 4, seed=seed), ds,
                           TrainSchedule(epochs=14, learning_rate=0.02, optimizer="adam",
                                         adversarial=AdversarialConfig(eps=0.08, steps=7)),
                           seed=seed).model
        weak_src = train(build_cnn(6, 4, seed=seed), ds,
                         TrainSchedule(epochs=2, learning_rate=0.02, optimizer="adam"),
                         seed=seed).model
        targets = [
            train(build_cnn(8, 4, seed=seed + 100), ds,
                  TrainSchedule(epochs=8, learning_rate=0.02, optimizer="adam",
                                adversarial=AdversarialConfig(eps=0.03, steps=7)),
                  seed=seed + 1).model,
            train(build_cnn(4, 4, seed=seed + 200), ds,
                  TrainSchedule(epochs=8, learning_rate=0.02, optimizer="adam",
                                adversarial=AdversarialConfig(eps=0.02, steps=7)),
                  seed=seed + 2).model,
        ]

        def searched_scheme(src_model):
            genome, _ = random_search_attacks(src_model, eval_ds, norm, budget=20,
                                              seed=seed)
            return decode(genome, SearchSpace.full(norm))

        s_robust = searched_scheme(robust_src)
        s_weak = searched_scheme(weak_src)
        mean_r = float(np.mean([run_scheme(t, eval_ds, s_robust, seed=seed)[0].robust_acc
                                for t in targets]))
        mean_w = float(np.mean([run_scheme(t, eval_ds, s_weak, seed=seed)[0].robust_acc
                                for t in targets]))
        wins += mean_r <= mean_w
        details.append(f"s{seed}: robust-src {mean_r:.3f} vs weak-src {mean_w:.3f}")
    elapsed = time.perf_counter() - t0
    assert wins >= 2, details
    assert elapsed <= 2700.0
    _pass("10c", f"{wins}/3 seeds ({'; '.join(details)}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 11: full determinism of the ledger


def _strip_volatile(record):
    return {k: v for k, v in record.items() if k not in ("ts", "wall_time_s")}


@pytest.mark.slow
def test_c11_ledger_determinism(tmp_path):
    def config(out):
        return {
            "schema": 1, "kind": "attack_search", "seeds": [0, 1],
            "out_dir": str(out),
            "dataset": {"name": "shapes", "n_per_class": 6, "image_side": 8,
                        "n_classes": 3, "noise_std": 0.05, "seed": 1},
            "model": {"kind": "cnn", "channels": 4, "seed": 0,
                      "train": {"epochs": 8, "learning_rate": 0.02,
                                "optimizer": "adam"}},
            "norm": {"family": "Linf", "eps_max": 0.05},
            "strategy": "nsga2",
            "strategy_params": {"pop": 4, "gens": 1},
            "eval_limit": 12,
        }

    run_experiment(config(tmp_path / "a"))
    run_experiment(config(tmp_path / "b"))
    rec_a = [_strip_volatile(r) for r in Ledger(tmp_path / "a" / "ledger.jsonl").read()]
    rec_b = [_strip_volatile(r) for r in Ledger(tmp_path / "b" / "ledger.jsonl").read()]
    assert json.dumps(rec_a, sort_keys=True) == json.dumps(rec_b, sort_keys=True)
    assert Ledger(tmp_path / "a" / "ledger.jsonl").verify_chain()
    _pass(11, "two complete runs byte-identical modulo timestamps")
