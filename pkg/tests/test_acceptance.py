"""End-to-end acceptance gate with independent oracles.

Each test prints one ``PASS``/``FAIL`` verdict line so a full run reads as a
checklist.  The two statistical checks (ablation ordering and the popularity
baseline) share one expensive module-scoped ablation run; everything else is
fast and exact:

 1. every autodiff op, the recommender loss, and both controllers against
    central finite differences,
 2. the fixed-learning-rate variant against an independently written plain
    SGD loop, bitwise,
 3. unrolled meta-gradients on one- and two-parameter surrogate objectives
    against whole-pipeline finite differences,
 4. the stop-controller score-function gradient estimator against the
    analytic derivative of a two-step expected return,
 5. mean recall ordering of the meta-learner variants on a synthetic family,
 6. the adapted recommender against the item-popularity baseline,
 7. continuity of the gradient preprocessing at its branch boundary,
 8. scenario evaluation against a brute-force ranking/recall oracle,
 9. bitwise determinism of seeded runs and checkpoint round-trips,
10. episode trace contracts across thousands of randomized configurations.
"""

import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from scenmeta import autodiff as ad
from scenmeta import checkpoint as ckpt
from scenmeta import controllers as ctrl
from scenmeta import evaluation as ev
from scenmeta import recnet
from scenmeta import tasks as tasklib
from scenmeta.episode import EpisodeConfig, EpisodeTrace, run_episode, trace_to_jsonl
from scenmeta.metatrain import (
    adapt,
    init_meta_params,
    meta_train,
    stop_controller_gradient,
)


@contextmanager
def _verdict(label):
    try:
        yield
    except BaseException:
        print(f"\n[acceptance] {label}: FAIL", flush=True)
        raise
    print(f"\n[acceptance] {label}: PASS", flush=True)


# ---------------------------------------------------------------------------
# 1. gradient correctness: ops, recommender loss, controllers vs central FD


FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_FLOOR = 1e-6
FD_INSTANCES = 50


def _fd_compare(build, arrays, rng, n_coords=4, label=""):
    """Tape gradients of mean(build(*leaves)) vs central finite differences.

    Checks up to ``n_coords`` randomly chosen coordinates per input; the
    relative-error bound applies wherever either side exceeds the floor.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = build(*leaves)
    loss = out if out.values.size == 1 and out.values.shape == () else ad.mean(out)
    gmap = ad.backward(loss)

    def value():
        o = build(*[ad.tensor(a) for a in arrays])
        return float(np.mean(o.values))

    for leaf, arr in zip(leaves, arrays):
        g = gmap.get(leaf.node_id)
        gv = np.zeros_like(arr) if g is None else g.values
        flat, gflat = arr.reshape(-1), gv.reshape(-1)
        picks = (
            range(flat.size)
            if flat.size <= n_coords
            else rng.choice(flat.size, size=n_coords, replace=False)
        )
        for j in picks:
            orig = flat[j]
            flat[j] = orig + FD_STEP
            hi = value()
            flat[j] = orig - FD_STEP
            lo = value()
            flat[j] = orig
            fd = (hi - lo) / (2.0 * FD_STEP)
            if max(abs(gflat[j]), abs(fd)) <= FD_FLOOR:
                continue
            rel = abs(gflat[j] - fd) / max(abs(gflat[j]), abs(fd))
            assert rel <= FD_RTOL, f"{label}: coord {j}: grad {gflat[j]} vs fd {fd}"


def _dims(rng, lo=1, hi=4):
    return int(rng.integers(lo, hi + 1))


def _away_from_zero(a, gap=0.05):
    a = np.where(np.abs(a) < gap, a + np.where(a >= 0, gap, -gap), a)
    return a


def _op_case(name, rng):
    """(build, arrays) for one random instance of the named op."""
    m, k, n = _dims(rng), _dims(rng), _dims(rng)
    if name == "matmul":
        return ad.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]
    if name == "add":
        b_shape = (1, n) if rng.random() < 0.5 else (m, n)
        return ad.add, [rng.normal(size=(m, n)), rng.normal(size=b_shape)]
    if name == "sub":
        return ad.sub, [rng.normal(size=(m, n)), rng.normal(size=(m, n))]
    if name == "elementwise_mul":
        return ad.elementwise_mul, [rng.normal(size=(m, n)), rng.normal(size=(m, n))]
    if name == "concat":
        return (
            lambda a, b: ad.concat(a, b, axis=-1),
            [rng.normal(size=(m, k)), rng.normal(size=(m, n))],
        )
    if name in ("relu", "max_with_zero"):
        return getattr(ad, name), [_away_from_zero(rng.normal(size=(m, n)))]
    if name in ("sigmoid", "tanh", "mean"):
        return getattr(ad, name), [rng.normal(size=(m, n))]
    if name == "l2_norm":
        return ad.l2_norm, [rng.normal(size=(m, n)) + 0.5]
    if name == "scale":
        s = float(rng.normal()) or 1.0
        return (lambda a: ad.scale(a, s)), [rng.normal(size=(m, n))]
    if name == "reshape":
        return (lambda a: ad.reshape(a, (m * n, 1))), [rng.normal(size=(m, n))]
    if name == "affine":
        h = 2 * _dims(rng)
        return ad.affine, [
            rng.normal(size=(m, k)),
            rng.normal(size=(k, n)),
            rng.normal(size=(m, h)),
            rng.normal(size=(h, n)),
            rng.normal(size=(1, n)),
        ]
    if name == "dense_sigmoid":
        return ad.dense_sigmoid, [
            rng.normal(size=(m, k)),
            rng.normal(size=(k, n)),
            rng.normal(size=(1, n)),
        ]
    if name == "block_affine":
        sizes = [_dims(rng) for _ in range(2)]
        offsets = (0, sizes[0], sizes[0] + sizes[1])
        rows, h = offsets[-1], 2 * _dims(rng)
        return (
            lambda *ts: ad.block_affine(*ts, offsets=offsets),
            [
                rng.normal(size=(rows, k)),
                rng.normal(size=(2, k, n)),
                rng.normal(size=(rows, h)),
                rng.normal(size=(2, h, n)),
                rng.normal(size=(2, 1, n)),
            ],
        )
    if name == "block_dense_sigmoid":
        sizes = [_dims(rng) for _ in range(2)]
        offsets = (0, sizes[0], sizes[0] + sizes[1])
        return (
            lambda *ts: ad.block_dense_sigmoid(*ts, offsets=offsets),
            [
                rng.normal(size=(offsets[-1], k)),
                rng.normal(size=(2, k, n)),
                rng.normal(size=(2, 1, n)),
            ],
        )
    if name == "stack_rows":
        return (
            lambda a, b: ad.stack_rows([a, b]),
            [rng.normal(size=(m, k)), rng.normal(size=(n,))],
        )
    if name == "slice_rows":
        rows = m + 2
        return (lambda a: ad.slice_rows(a, 1, rows - 1)), [rng.normal(size=(rows, k))]
    if name == "slice_cols":
        cols = n + 2
        return (lambda a: ad.slice_cols(a, 1, cols - 1)), [rng.normal(size=(m, cols))]
    if name == "gate_update":
        g = rng.normal(size=(m, 1))
        return (
            lambda t, h: ad.gate_update(t, h, g),
            [rng.normal(size=(m, 1)), rng.uniform(0.1, 0.9, size=(m, 2))],
        )
    if name == "lstm_cell":
        h = _dims(rng, 2, 4)
        return (
            lambda z, hc: ad.lstm_cell(z, hc, hidden=h),
            [rng.normal(size=(m, 4 * h)), rng.normal(size=(m, 2 * h))],
        )
    raise AssertionError(f"no case generator for op {name!r}")


def _recommender_min_gap(groups, arch, eu, ep, en, margin):
    """Smallest |pre-activation| / |hinge slack| in an independent forward."""
    gaps = []

    def tower(prefix, x):
        names = [k for k in groups if k.startswith(f"{prefix}_W")]
        for l in range(1, len(names) + 1):
            x = x @ groups[f"{prefix}_W{l}"] + groups[f"{prefix}_b{l}"]
            if l < len(names):
                gaps.append(np.min(np.abs(x)))
                x = np.maximum(x, 0.0)
        return x

    def interaction(x):
        n = (len(groups) - 1) // 2
        for l in range(1, n + 1):
            x = x @ groups[f"W{l}"] + groups[f"b{l}"]
            gaps.append(np.min(np.abs(x)))
            x = np.maximum(x, 0.0)
        return (x @ groups["w"]).ravel()

    if arch == "mapping":
        s_pos = np.sum(tower("u", eu) * tower("i", ep), axis=1)
        s_neg = np.sum(tower("u", eu) * tower("i", en), axis=1)
    else:
        s_pos = interaction(np.concatenate([eu, ep], axis=1))
        s_neg = interaction(np.concatenate([eu, en], axis=1))
    gaps.append(np.min(np.abs(margin - s_pos + s_neg)))
    return float(min(gaps))


def _recommender_case(rng, arch):
    """Random jittered parameters and a batch kept away from ReLU/hinge kinks."""
    d = 6
    table = recnet.EmbeddingTable(rng.normal(size=(7, d)), rng.normal(size=(9, d)))
    for _ in range(200):
        base = recnet.init_recommender_params(arch, d, rng)
        groups = {
            k: v + rng.normal(scale=0.2, size=v.shape) for k, v in base.groups.items()
        }
        batch = [
            recnet.TrainTriple(
                int(rng.integers(7)), int(rng.integers(9)), int(rng.integers(9))
            )
            for _ in range(4)
        ]
        eu, ep, en = recnet.gather_triples(table, batch)
        if _recommender_min_gap(groups, arch, eu, ep, en, 1.0) > 1e-3:
            break
    else:  # pragma: no cover - astronomically unlikely
        raise AssertionError("could not sample a kink-free recommender instance")
    names = sorted(groups)

    def build(*ts):
        return recnet.triples_loss_tensor(dict(zip(names, ts)), arch, eu, ep, en, 1.0)

    return build, [groups[k] for k in names]


UPDATE_FUSED_KEYS = ("w_x", "w_h", "b", "w_head", "b_head")
STOP_FUSED_KEYS = ("w_x", "w_h", "b", "w_stop", "b_stop")


def _update_controller_case(rng):
    fused = ctrl.fuse_update_arrays(ctrl.init_update_controller(rng).arrays)
    arrays = [
        fused[k] + rng.normal(scale=0.3, size=fused[k].shape) for k in UPDATE_FUSED_KEYS
    ]
    n = _dims(rng, 2, 5)
    grad = rng.normal(size=n)
    param = rng.normal(size=n)
    loss = float(abs(rng.normal()) + 0.1)
    state = rng.normal(scale=0.5, size=(n, 2 * ctrl.UPDATE_HIDDEN))

    def build(*ts):
        d = dict(zip(UPDATE_FUSED_KEYS, ts))
        alpha, beta, _ = ctrl.update_gates(d, ad.tensor(state), grad, loss, param)
        return ad.concat(alpha, beta, axis=-1)

    return build, arrays


def _stop_controller_case(rng):
    fused = ctrl.fuse_stop_arrays(ctrl.init_stop_controller(rng).arrays)
    arrays = [
        fused[k] + rng.normal(scale=0.3, size=fused[k].shape) for k in STOP_FUSED_KEYS
    ]
    loss = float(abs(rng.normal()) + 0.1)
    gnorm = float(abs(rng.normal()))
    state = rng.normal(scale=0.5, size=(1, 2 * ctrl.STOP_HIDDEN))

    def build(*ts):
        d = dict(zip(STOP_FUSED_KEYS, ts))
        p, _ = ctrl.stop_probability(d, ad.tensor(state), loss, gnorm)
        return p

    return build, arrays


def test_gradient_correctness():
    with _verdict("1 gradient correctness (ops + recommender + controllers)"):
        t0 = time.time()
        rng = np.random.default_rng(1001)
        for name in sorted(ad._OPS):
            for _ in range(FD_INSTANCES):
                build, arrays = _op_case(name, rng)
                _fd_compare(build, arrays, rng, label=name)
        # the two group-packing helpers dispatch outside the fused-op table
        for _ in range(FD_INSTANCES):
            m, k = _dims(rng), _dims(rng)
            rows = m * k + 2
            _fd_compare(
                lambda a, b: ad.pack_groups([a, b], rows),
                [rng.normal(size=(m, k)), rng.normal(size=(rows,))],
                rng,
                label="pack_groups",
            )
            _fd_compare(
                lambda a: ad.group_slice(a, 1, m),
                [rng.normal(size=(2, m + 1, 1))],
                rng,
                label="group_slice",
            )
        for arch in ("mapping", "interaction"):
            for _ in range(FD_INSTANCES):
                build, arrays = _recommender_case(rng, arch)
                _fd_compare(build, arrays, rng, label=f"recommender/{arch}")
        for case in (_update_controller_case, _stop_controller_case):
            for _ in range(FD_INSTANCES):
                build, arrays = case(rng)
                _fd_compare(build, arrays, rng, label=case.__name__)
        assert time.time() - t0 < 120.0, "gradient checks exceeded the time budget"


# ---------------------------------------------------------------------------
# 2. fixed-learning-rate variant vs an independent plain-SGD loop, bitwise


def _tiny_family(seed, n_scenarios=6, users=10, items=12, d=6, shots=6):
    log, table = tasklib.gen_synthetic_family(n_scenarios, users, items, d, 0.5, seed)
    return tasklib.build_tasks(log, shots=shots, seed=seed), table


def test_sgd_oracle_equivalence():
    with _verdict("2 plain-SGD oracle equivalence (bitwise, 10 steps)"):
        tasks, table = _tiny_family(21)
        task = tasks[0]
        meta = init_meta_params("mapping", table.dimension, seed=9)
        cfg = EpisodeConfig(
            t_max=10, batch_size=8, variant="fixed_lr", stop_mode="threshold", seed=123
        )
        _, trace = run_episode(
            meta, task, table, cfg, np.random.default_rng(123), collect_snapshots=True
        )
        assert trace.stop_step == 10

        # independent loop: plain dict-of-arrays SGD on the reference (tape)
        # gradients, replaying the identical seeded batch stream
        groups = {k: v.copy() for k, v in meta.init.items()}
        rng = np.random.default_rng(123)
        for t in range(10):
            batch = tasklib.sample_batch(task, 8, rng)
            rows = recnet.gather_triples(table, batch)
            params = recnet.RecommenderParams(
                "mapping", {k: v.copy() for k, v in groups.items()}
            )
            _, grads = recnet.loss_and_grads_ref(params, rows)
            for k in groups:
                groups[k] = groups[k] - grads[k] * cfg.fixed_lr
            snap = trace.params_at_step[t + 1]
            for k in groups:
                assert np.array_equal(groups[k], snap.groups[k]), (
                    f"step {t + 1}, group {k}: trajectories diverged"
                )


# ---------------------------------------------------------------------------
# 3. unrolled meta-gradients on tiny surrogates vs whole-pipeline FD


def test_meta_gradient_oracle():
    with _verdict("3 first-order meta-gradient oracle (surrogate unrolls)"):
        rng = np.random.default_rng(11)
        uc = ctrl.init_update_controller(rng)
        stacked = {k: t.values.copy() for k, t in ctrl.stack_controllers([uc]).items()}
        for n_params in (1, 2):
            offsets = (0, n_params)
            feats = [
                rng.normal(size=(n_params, ctrl.UPDATE_INPUT_WIDTH)) for _ in range(3)
            ]
            gconsts = [rng.normal(size=(n_params, 1)) for _ in range(3)]
            theta0 = rng.normal(size=(n_params, 1))
            target = rng.normal(size=(n_params, 1))

            def unroll(theta_t, ts):
                # three learned updates with frozen step features, then a
                # quadratic objective on the final parameters
                state = ctrl.zero_flat_state(n_params)
                th = theta_t
                for f, g in zip(feats, gconsts):
                    heads, state = ctrl.flat_gates(ts, state, f, offsets)
                    th = ad.gate_update(th, heads, g)
                d = ad.sub(th, ad.tensor(target))
                return ad.mean(ad.elementwise_mul(d, d))

            tape = ad.Tape()
            theta_leaf = tape.leaf(theta0)
            leaves = {k: tape.leaf(v) for k, v in stacked.items()}
            gmap = ad.backward(unroll(theta_leaf, leaves))

            def value():
                ts = {k: ad.tensor(v) for k, v in stacked.items()}
                return float(unroll(ad.tensor(theta0), ts).values)

            def fd_at(arr, idx, h=1e-6):
                flat = arr.reshape(-1)
                orig = flat[idx]
                flat[idx] = orig + h
                hi = value()
                flat[idx] = orig - h
                lo = value()
                flat[idx] = orig
                return (hi - lo) / (2.0 * h)

            # shared-initialization path: every coordinate of theta^(0)
            g_init = gmap[theta_leaf.node_id].values.reshape(-1)
            for j in range(n_params):
                fd = fd_at(theta0, j)
                assert abs(g_init[j] - fd) / max(abs(fd), 1e-12) <= 1e-3
            # gate-head biases: the two entries of the fused head bias
            g_head = gmap[leaves["b_head"].node_id].values.reshape(-1)
            for j in range(2):
                fd = fd_at(stacked["b_head"], j)
                assert abs(g_head[j] - fd) / max(abs(fd), 1e-12) <= 1e-3


# ---------------------------------------------------------------------------
# 4. stop-gradient estimator vs the analytic two-step expected return


def test_reinforce_estimator_soundness():
    with _verdict("4 stop-gradient estimator vs analytic expectation"):
        t0 = time.time()
        rng = np.random.default_rng(17)
        sc = ctrl.init_stop_controller(rng)
        sc.arrays["b_stop"][...] = -1.0  # keep both stop events likely
        fused = ctrl.fuse_stop_arrays(sc.arrays)
        feats = [(1.0, 0.6), (0.7, 0.4)]
        losses = [1.0, 0.6, 0.45]  # objective after 0, 1, 2 updates

        # deterministic stop probabilities (the head bias never feeds the
        # recurrence, so dp_t/db_stop = p_t (1 - p_t) exactly)
        cts = ctrl.as_tensor_dict(fused)
        state = ctrl.zero_stop_state()
        p = []
        for lv, gn in feats:
            pt, state = ctrl.stop_probability(cts, state, lv, gn)
            p.append(pt.values.item())
        p1, p2 = p
        analytic = p1 * (1 - p1) * (losses[0] - (p2 * losses[1] + (1 - p2) * losses[2]))
        analytic += (1 - p1) * p2 * (1 - p2) * (losses[1] - losses[2])

        draws = []
        for _ in range(10_000):
            tape = ad.Tape()
            leaves = ctrl.as_tensor_dict(fused, tape)
            trace = EpisodeTrace(stop_leaves=leaves)
            st = ctrl.zero_stop_state()
            n_updates = 0
            for lv, gn in feats:
                pt, st = ctrl.stop_probability(leaves, st, lv, gn)
                trace.p_tensors.append(pt)
                if rng.random() < pt.values.item():
                    break
                n_updates += 1
            trace.stop_step = n_updates
            grad = stop_controller_gradient(trace, losses[: n_updates + 1])
            draws.append(grad["b_stop"].item())

        mean = float(np.mean(draws))
        se = float(np.std(draws, ddof=1) / np.sqrt(len(draws)))
        assert se < abs(analytic), "estimator too noisy for a meaningful check"
        assert abs(mean - analytic) <= 3.0 * se, (
            f"MC mean {mean} vs analytic {analytic} (se {se})"
        )
        assert time.time() - t0 < 60.0


# ---------------------------------------------------------------------------
# 5 & 6. statistical checks on the synthetic scenario family


ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_EPISODES = 2000
ABLATION_META_LR = 0.1
ABLATION_VARIANTS = ("complete", "rand_init", "fixed_lr", "fixed_step")


def _ablation_family():
    """200 meta-train + 50 meta-test scenarios, 16-shot, 16-dim embeddings.

    Scenario/user/item latents concentrate on a low-dimensional signal
    subspace (with a stronger scenario term) so that per-scenario adaptation
    from frozen embeddings is both necessary and achievable at this scale.
    """
    rng = np.random.default_rng(5)
    d, n_scen, r, bg, gamma = 16, 250, 2, 0.15, 2.0

    def latents(n):
        a = rng.standard_normal((n, d)) * bg
        a[:, :r] = rng.standard_normal((n, r))
        return a

    u, i, c = latents(24 * 4), latents(40 * 4), latents(n_scen) * gamma
    z_std = np.std((u[:50, None, :] + c[0]) @ i[:50].T / np.sqrt(d))
    b = np.sqrt(1.5 / z_std)
    log, table = tasklib.gen_synthetic_family(
        n_scen, 24, 40, d, 0.3, 11, latents=(u * b, i * b, c * b)
    )
    all_tasks = tasklib.build_tasks(log, shots=16, seed=11)
    return all_tasks[:200], all_tasks[200:], table


@pytest.fixture(scope="module")
def ablation_results():
    train_tasks, test_tasks, table = _ablation_family()
    cfg = EpisodeConfig(t_max=30, batch_size=16)
    cfg.architecture = "mapping"
    t0 = time.time()
    rows = ev.run_ablation(
        list(ABLATION_VARIANTS),
        train_tasks,
        test_tasks,
        table,
        cfg,
        ABLATION_EPISODES,
        list(ABLATION_SEEDS),
        n_list=(10,),
        lr=ABLATION_META_LR,
    )
    elapsed = time.time() - t0
    seed_means = {}
    for row in rows:
        seed_means.setdefault((row["variant"], row["seed"]), []).append(row["recall"])
    seed_means = {k: float(np.mean(v)) for k, v in seed_means.items()}
    pop = float(np.mean([ev.evaluate_itempop(t, (10,))[10] for t in test_tasks]))
    return {"seed_means": seed_means, "elapsed": elapsed, "pop": pop}


def test_ablation_ordering(ablation_results):
    with _verdict("5 ablation ordering (complete >= every variant)"):
        sm = ablation_results["seed_means"]
        means = {
            v: float(np.mean([sm[(v, s)] for s in ABLATION_SEEDS]))
            for v in ABLATION_VARIANTS
        }
        print(
            "\n[acceptance] variant means:",
            {v: round(m, 4) for v, m in means.items()},
            f"({ablation_results['elapsed'] / 60:.1f} min)",
            flush=True,
        )
        for v in ABLATION_VARIANTS[1:]:
            assert means["complete"] >= means[v], (
                f"complete {means['complete']:.4f} < {v} {means[v]:.4f}"
            )
        worst = min(ABLATION_VARIANTS[1:], key=means.get)
        wins = sum(
            sm[("complete", s)] > sm[(worst, s)] for s in ABLATION_SEEDS
        )
        losses = sum(
            sm[("complete", s)] < sm[(worst, s)] for s in ABLATION_SEEDS
        )
        p = ev.sign_test_p(wins, losses)
        assert p < 0.1, f"sign test vs {worst}: {wins}W/{losses}L, p={p:.3f}"
        assert ablation_results["elapsed"] < 1800.0, "ablation exceeded 30 minutes"


def test_beats_item_popularity(ablation_results):
    with _verdict("6 adapted recommender beats item popularity (>= 4/5 seeds)"):
        sm = ablation_results["seed_means"]
        pop = ablation_results["pop"]
        wins = sum(sm[("complete", s)] > pop for s in ABLATION_SEEDS)
        assert wins >= 4, f"complete beats popularity ({pop:.4f}) on {wins}/5 seeds"


# ---------------------------------------------------------------------------
# 7. gradient-preprocessing continuity at the branch boundary


def test_preprocess_continuity():
    with _verdict("7 preprocessing continuity at the branch boundary"):
        boundary = float(np.exp(-ctrl.PREPROCESS_P))
        for sign in (1.0, -1.0):
            lo = np.concatenate(ctrl.preprocess(np.array([sign * (boundary - 1e-12)])))
            hi = np.concatenate(ctrl.preprocess(np.array([sign * (boundary + 1e-12)])))
            assert np.all(np.abs(hi - lo) <= 1e-6), f"jump at sign {sign}: {hi - lo}"


# ---------------------------------------------------------------------------
# 8. scenario evaluation vs a brute-force ranking/recall oracle


def _brute_force_recall(params, table, task, n_list):
    """Per-pair scoring, explicit tie-rule sort, and hand-rolled recall."""
    groups, arch = params.groups, params.architecture

    def score_one(user, item):
        x_u = table.user_matrix[user].copy()
        x_i = table.item_matrix[item].copy()
        if arch == "interaction":
            x = np.concatenate([x_u, x_i])
            n = (len(groups) - 1) // 2
            for l in range(1, n + 1):
                x = np.maximum(x @ groups[f"W{l}"] + groups[f"b{l}"], 0.0)
            return float(x @ groups["w"][:, 0])

        def tower(prefix, x):
            names = [k for k in groups if k.startswith(f"{prefix}_W")]
            for l in range(1, len(names) + 1):
                x = x @ groups[f"{prefix}_W{l}"] + groups[f"{prefix}_b{l}"]
                if l < len(names):
                    x = np.maximum(x, 0.0)
            return x

        return float(np.dot(tower("u", x_u), tower("i", x_i)))

    rel = {}
    for t in task.query:
        rel.setdefault(t.user, set()).add(t.pos_item)
    sums = {n: 0.0 for n in n_list}
    for user in sorted(rel):
        exclude = {i for (u, i) in task.support if u == user}
        cands = [int(i) for i in task.candidate_items if int(i) not in exclude]
        ranked = sorted(cands, key=lambda i: (-score_one(user, i), i))
        for n in n_list:
            sums[n] += len(set(ranked[:n]) & rel[user]) / len(rel[user])
    return {n: sums[n] / len(rel) for n in n_list}


def test_recall_oracle_equivalence():
    with _verdict("8 recall vs brute force on 1000 tiny scenarios (exact)"):
        rng = np.random.default_rng(23)
        d = 4
        table = recnet.EmbeddingTable(rng.normal(size=(12, d)), rng.normal(size=(20, d)))
        params_by_arch = {}
        for arch in ("mapping", "interaction"):
            base = recnet.init_recommender_params(arch, d, rng)
            params_by_arch[arch] = recnet.RecommenderParams(
                arch,
                {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in base.groups.items()},
            )
        n_list = (1, 2, 5)
        for s in range(1000):
            k = int(rng.integers(2, 9))
            cand = rng.choice(20, size=k, replace=False)
            users = rng.choice(12, size=int(rng.integers(1, 4)), replace=False)
            support, query = [], []
            for u in users:
                perm = rng.permutation(cand)
                n_sup = int(rng.integers(0, max(1, k - 1)))
                support += [(int(u), int(i)) for i in perm[:n_sup]]
                rest = perm[n_sup:]
                for i in rest[: int(rng.integers(1, len(rest) + 1))]:
                    query.append(
                        recnet.TrainTriple(int(u), int(i), int(rng.choice(cand)))
                    )
            task = tasklib.ScenarioTask(s, support, query, cand, 20)
            params = params_by_arch[("mapping", "interaction")[s % 2]]
            got = ev.evaluate_scenario(params, table, task, n_list)
            want = _brute_force_recall(params, table, task, n_list)
            assert got == want, f"scenario {s}: {got} vs {want}"


# ---------------------------------------------------------------------------
# 9. determinism and checkpoint persistence


def _assert_meta_equal(a, b):
    assert a.architecture == b.architecture and a.dimension == b.dimension
    assert sorted(a.init) == sorted(b.init)
    for k in a.init:
        assert np.array_equal(a.init[k], b.init[k])
    for k in a.update:
        for key in a.update[k].arrays:
            assert np.array_equal(a.update[k].arrays[key], b.update[k].arrays[key])
    for key in a.stop.arrays:
        assert np.array_equal(a.stop.arrays[key], b.stop.arrays[key])


def test_determinism_and_persistence(tmp_path):
    with _verdict("9 seeded determinism and bitwise checkpoint round-trips"):
        tasks, table = _tiny_family(31)
        cfg = EpisodeConfig(t_max=4, batch_size=4)
        runs = [
            meta_train(tasks, table, cfg, 30, seed=3, architecture="mapping", lr=0.01)
            for _ in range(2)
        ]
        (m1, log1), (m2, log2) = runs
        _assert_meta_equal(m1, m2)
        assert log1 == log2

        acfg = replace(cfg, seed=5)
        p1, t1 = adapt(m1, tasks[0], table, acfg, return_trace=True)
        p2, t2 = adapt(m1, tasks[0], table, acfg, return_trace=True)
        assert trace_to_jsonl(t1) == trace_to_jsonl(t2)
        for k in p1.groups:
            assert np.array_equal(p1.groups[k], p2.groups[k])

        meta_path = tmp_path / "meta.ckpt"
        ckpt.save_meta(meta_path, m1)
        loaded = ckpt.load_meta(meta_path)
        _assert_meta_equal(m1, loaded)
        meta_path2 = tmp_path / "meta2.ckpt"
        ckpt.save_meta(meta_path2, loaded)
        assert meta_path.read_bytes() == meta_path2.read_bytes()

        rec_path = tmp_path / "rec.ckpt"
        ckpt.save_recommender(rec_path, p1)
        rec = ckpt.load_recommender(rec_path)
        assert rec.architecture == p1.architecture
        for k in p1.groups:
            assert np.array_equal(rec.groups[k], p1.groups[k])
        rec_path2 = tmp_path / "rec2.ckpt"
        ckpt.save_recommender(rec_path2, rec)
        assert rec_path.read_bytes() == rec_path2.read_bytes()


# ---------------------------------------------------------------------------
# 10. episode trace contracts over randomized configurations


N_CONTRACT_EPISODES = 10_000


def test_episode_contracts():
    with _verdict(f"10 trace contracts over {N_CONTRACT_EPISODES} episodes"):
        tasks, table = _tiny_family(41, n_scenarios=8, d=4, shots=4)
        user_bytes = table.user_matrix.tobytes()
        item_bytes = table.item_matrix.tobytes()
        rng = np.random.default_rng(97)
        metas = []
        for arch in ("mapping", "interaction"):
            for seed in (1, 2, 3):
                meta = init_meta_params(arch, table.dimension, seed=seed)
                for k in meta.init:
                    meta.init[k] += rng.normal(scale=0.1, size=meta.init[k].shape)
                for group in meta.update.values():
                    for key in group.arrays:
                        group.arrays[key] += rng.normal(
                            scale=0.1, size=group.arrays[key].shape
                        )
                for key in meta.stop.arrays:
                    meta.stop.arrays[key] += rng.normal(
                        scale=0.1, size=meta.stop.arrays[key].shape
                    )
                metas.append(meta)

        variants = ("complete", "rand_init", "fixed_lr", "fixed_step")
        for i in range(N_CONTRACT_EPISODES):
            t_max = int(rng.integers(1, 6))
            cfg = EpisodeConfig(
                t_max=t_max,
                batch_size=int(rng.integers(1, 7)),
                variant=variants[int(rng.integers(4))],
                stop_mode=("stochastic", "threshold")[int(rng.integers(2))],
                threshold=float(rng.uniform(0.05, 0.9)),
                fixed_steps=int(rng.integers(1, t_max + 1)),
                seed=i,
            )
            meta = metas[i % len(metas)]
            task = tasks[i % len(tasks)]
            _, trace = run_episode(meta, task, table, cfg, np.random.default_rng(i))
            assert trace.stop_step <= cfg.t_max
            assert len(trace.steps) <= cfg.t_max
            if cfg.variant == "fixed_step":
                assert trace.stop_step == cfg.fixed_steps
            for rec in trace.steps:
                assert 0.0 < rec.stop_prob < 1.0
                if cfg.variant != "fixed_lr":
                    for alpha, beta in rec.gate_means.values():
                        assert 0.0 < alpha < 1.0 and 0.0 < beta < 1.0
            assert table.user_matrix.tobytes() == user_bytes
            assert table.item_matrix.tobytes() == item_bytes
