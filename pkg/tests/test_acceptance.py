"""Acceptance criteria 1-9, each reported as one PASS/FAIL line.

Tolerances are pinned here as module constants.
"""

import time
from collections import defaultdict

import numpy as np

import oracles
from cdnas import evolve, genome, numcore as nc, training
from cdnas.genome import H_C, H_E, H_S, Leaf, op
from cdnas.operators import ALL_OPERATORS, OperatorKind as K

F2_ABS_TOL = 1e-12
N_TREES = 10_000
FD_STEP = 1e-5
FD_REL_TOL = 1e-4
FD_ABS_TOL = 1e-6
FD_DRAWS = 100
NSGA_POPULATIONS = 50
NSGA_POINTS = 200
MF_TEST_AUC = 0.85
ORACLE_TEST_AUC = 0.88
SEARCH_BUDGET_S = 600.0
MF_SLACK = 0.02
MIN_F2_LEVELS = 3
N_PERTURBATIONS = 1_000
PERTURBATION = 0.1


# --- 1 ----------------------------------------------------------------------------

WORKED = {
    (3, 1, 3): (op("Tanh", op("Neg", op("Abs", H_S))), 0.80585),
    (2, 2, 3): (op("Add", op("Neg", H_S), op("Abs", H_E)), 0.91085),
    (3, 3, 4): (op("Add", op("Neg", op("Add", H_S, H_E)), op("Abs", H_C)), 0.81580),
    (3, 4, 4): (op("Add", op("Neg", op("Add", H_S, H_E)), op("Mul", H_C, H_S)), 0.82080),
    (3, 4, 5): (op("Add", op("Neg", op("Add", H_S, H_E)), op("Mul", op("Abs", H_C), H_S)), 0.82075),
}


def test_criterion_1_interpretability_values(acceptance):
    worst = 0.0
    for m, (tree, expected) in WORKED.items():
        assert tuple(vars(genome.metrics(tree)).values()) == m
        worst = max(worst, abs(genome.interpretability(tree) - expected),
                    abs(genome.interpretability_from_metrics(*m) - expected))
    assert acceptance(1, worst <= F2_ABS_TOL, f"max |f2 - expected| = {worst:.2e} (tol {F2_ABS_TOL})")


# --- 2 ----------------------------------------------------------------------------


def _interval_violations(groups: dict) -> int:
    """Groups keyed by an ordered level; every member of a better level must beat every worse one."""
    keys = sorted(groups)
    return sum(min(groups[hi]) <= max(groups[lo]) for lo, hi in zip(keys, keys[1:]))


def test_criterion_2_lexicographic_priority(acceptance):
    rng = np.random.default_rng(2)
    rows = []
    for _ in range(N_TREES):
        t = genome.random_tree((1, 12), rng)
        m = genome.metrics(t)
        rows.append((m.depth, m.breadth, m.num_c, genome.interpretability(t)))
    by_depth, by_breadth, by_size = defaultdict(list), defaultdict(lambda: defaultdict(list)), defaultdict(lambda: defaultdict(list))
    for d, b, c, f in rows:
        by_depth[-d].append(f)  # shallower is better
        by_breadth[d][b].append(f)  # broader is better
        by_size[(d, b)][-c].append(f)  # fewer nodes is better
    violations = _interval_violations(by_depth)
    violations += sum(_interval_violations(g) for g in by_breadth.values())
    violations += sum(_interval_violations(g) for g in by_size.values())
    depths = sorted({r[0] for r in rows})
    assert acceptance(2, violations == 0,
                      f"{violations} ordering violations over {N_TREES} trees (depths {depths[0]}..{depths[-1]})")


# --- 3 ----------------------------------------------------------------------------

D = 4


def _draw(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 2.0, size=shape)


def _rel_ok(analytic, numeric):
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return (err <= FD_ABS_TOL) | (err <= FD_REL_TOL * scale)


def _check_operator(kind, rng):
    """Count FD mismatches over every input and weight entry of one random draw."""
    arrays = {f"x{i}": _draw(rng, (1, D)) for i in range(kind.arity)}
    if kind.has_params:
        rows = 2 * D if kind is K.CONCAT else D
        arrays["W"] = _draw(rng, (rows, 1 if kind is K.FFN else D))
    probe = None

    def forward(values, tape):
        nonlocal probe
        xs = [tape.input(values[f"x{i}"]) for i in range(kind.arity)]
        params = None
        if "W" in values:
            store = nc.ParamStore()
            store.add("W", values["W"])
            params = {"W": tape.param(store, "W")}
        out = nc.apply_primitive(kind, xs, params, tape)
        if probe is None:
            probe = _draw(rng, out.data.shape)
        return xs, params, out

    tape = nc.Tape()
    xs, params, out = forward(arrays, tape)
    grads = nc.backward(tape, out, seed=probe)
    analytic = {f"x{i}": grads[x] for i, x in enumerate(xs)}
    if params:
        analytic["W"] = grads[params["W"]]
    bad = 0
    for name, base in arrays.items():
        def f(v, name=name):
            return float(np.sum(forward({**arrays, name: v}, nc.Tape())[2].data * probe))

        numeric = oracles.central_difference(f, base, FD_STEP)
        bad += int(np.sum(~_rel_ok(analytic[name], numeric)))
    return bad


def _check_head(model, rng, n_param_entries=20):
    y0 = _draw(rng, (1, model.q.shape[1]))
    names = [n for n in model.store if n.startswith("fc")]
    tape = nc.Tape()
    y = tape.input(y0)
    z = training.head_forward(model, y, tape)
    grads = nc.backward(tape, z)
    by_name = {tape.entries[v.index].param: g for v, g in grads.items() if tape.entries[v.index].param}

    def logit():
        return float(training.head_forward(model, nc.Tape().input(y0), nc.Tape()).data[0])

    bad = 0
    numeric_y = oracles.central_difference(
        lambda v: float(training.head_forward(model, nc.Tape().input(v), nc.Tape()).data[0]), y0, FD_STEP)
    bad += int(np.sum(~_rel_ok(grads[y], numeric_y)))
    for name in names:
        arr = model.store[name]
        for flat in rng.choice(arr.size, size=min(n_param_entries, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            arr[idx] = old + FD_STEP
            up = logit()
            arr[idx] = old - FD_STEP
            down = logit()
            arr[idx] = old
            bad += int(not _rel_ok(by_name[name][idx], (up - down) / (2 * FD_STEP)))
    return bad


def test_criterion_3_gradients(acceptance):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    failures = {}
    for kind in ALL_OPERATORS:
        failures[kind.label] = sum(_check_operator(kind, rng) for _ in range(FD_DRAWS))
    q = np.eye(D)
    head_bad = 0
    for i in range(FD_DRAWS):
        model = training.assemble(op("Mul", H_S, H_E), 3, q, seed=i)
        for name in model.store:
            if name.startswith("fc") and name.endswith(".b"):
                model.store[name][...] = _draw(rng, model.store[name].shape)
        head_bad += _check_head(model, rng)
    failures["FC head"] = head_bad
    elapsed = time.perf_counter() - start
    total = sum(failures.values())
    worst = [k for k, v in failures.items() if v]
    ok = total == 0 and elapsed < 60
    assert acceptance(3, ok, f"{total} FD mismatches across 15 operators + FC head "
                      f"({FD_DRAWS} draws each, rel tol {FD_REL_TOL}) in {elapsed:.1f}s"
                      + (f"; failing: {worst}" if worst else ""))


# --- 4 ----------------------------------------------------------------------------


def test_criterion_4_nsga_oracles(acceptance):
    rng = np.random.default_rng(4)
    rank_mismatch = crowd_mismatch = 0
    for i in range(NSGA_POPULATIONS):
        pts = rng.random((NSGA_POINTS, 2))
        if i % 2:
            pts = np.round(pts, 1)  # ties and duplicates
        ranks = evolve.fast_nondominated_sort(pts)
        expected = oracles.ranks_by_peeling(pts.tolist())
        rank_mismatch += int(np.sum(ranks != np.array(expected)))
        for r in set(expected):
            members = [j for j, e in enumerate(expected) if e == r]
            got = evolve.crowding_distance(pts[members])
            want = np.array(oracles.crowding_loop(pts[members].tolist()))
            crowd_mismatch += int(np.sum(~np.isclose(got, want, rtol=0, atol=1e-12)))
    ok = rank_mismatch == 0 and crowd_mismatch == 0
    assert acceptance(4, ok, f"{rank_mismatch} rank and {crowd_mismatch} crowding mismatches over "
                      f"{NSGA_POPULATIONS} populations of {NSGA_POINTS}")


# --- 5 ----------------------------------------------------------------------------


def _topology(tree):
    return [(p, n.kind if isinstance(n, Leaf) else n.kind.arity) for p, n in genome.iter_nodes(tree)]


def test_criterion_5_repair(acceptance):
    rng = np.random.default_rng(5)
    infeasible_before = infeasible_after = not_idempotent = topology_changed = 0
    for _ in range(N_TREES):
        raw = genome.grow_tree(int(rng.integers(1, 10)), rng)
        infeasible_before += bool(genome.infer_shapes(raw)[1])
        fixed = genome.repair(raw, rng)
        infeasible_after += bool(genome.infer_shapes(fixed)[1])
        not_idempotent += genome.repair(fixed, rng) != fixed
        topology_changed += _topology(fixed) != _topology(raw)
    ok = infeasible_after == not_idempotent == topology_changed == 0 and infeasible_before > 0
    assert acceptance(5, ok, f"{infeasible_before}/{N_TREES} trees needed repair; after repair: "
                      f"{infeasible_after} infeasible, {not_idempotent} non-idempotent, "
                      f"{topology_changed} topology changes")


# --- 6 ----------------------------------------------------------------------------


def _valid(tree) -> bool:
    try:
        genome.validate(tree)
    except genome.StructuralError:
        return False
    return genome.metrics(tree).depth <= genome.MAX_DEPTH and not genome.infer_shapes(tree)[1]


def test_criterion_6_variation_closure(acceptance):
    rng = np.random.default_rng(6)
    invalid = defaultdict(int)
    count_errors = defaultdict(int)
    capped = defaultdict(int)

    def parent(lo):
        return genome.random_tree((lo, 8), rng)

    for _ in range(N_TREES):
        a, b = parent(2), parent(2)
        o1, o2 = evolve.exchange(a, b, rng)
        invalid["exchange"] += not (_valid(o1) and _valid(o2))
        nc_ = [genome.metrics(t).num_c for t in (a, b, o1, o2)]
        count_errors["exchange"] += nc_[0] + nc_[1] != nc_[2] + nc_[3]

        p = parent(2)
        out = evolve.delete_node(p, rng)
        invalid["delete"] += not _valid(out)
        count_errors["delete"] += genome.metrics(out).num_c != genome.metrics(p).num_c - 1

        p = parent(1)
        invalid["replace"] += not _valid(evolve.replace_node(p, rng))

        p = parent(1)
        out = evolve.insert_node(p, rng)
        invalid["insert"] += not _valid(out)
        if out is p:
            capped["insert"] += 1
        else:
            count_errors["insert"] += genome.metrics(out).num_c != genome.metrics(p).num_c + 1
    ok = not any(invalid.values()) and not any(count_errors.values())
    assert acceptance(6, ok, f"{N_TREES} applications per operator: invalid={dict(invalid)}, "
                      f"num_c errors={dict(count_errors)}, insert cap-clones={capped['insert']}")


# --- 7 ----------------------------------------------------------------------------


def test_criterion_7_baseline_trainability(acceptance, planted, planted_ds):
    start = time.perf_counter()
    tr_, te = planted_ds.split("train"), planted_ds.split("test")
    U, V = oracles.fit_logistic_mf(tr_.student, tr_.exercise, tr_.score, planted_ds.N, planted_ds.M, k=8, lam=1.0)
    oracle = oracles.auc_pairs(np.sum(U[te.student] * V[te.exercise], axis=1), te.score)
    bayes = training.auc_score(planted.true_probability(te.student, te.exercise), te.score)

    model = training.assemble(genome.seed_tree("MF"), planted_ds.N, planted_ds.q.matrix, seed=1)
    training.train(model, planted_ds, training.TrainConfig(epochs=30))
    mf = training.evaluate_split(model, planted_ds, "test").auc
    elapsed = time.perf_counter() - start
    ok = oracle >= ORACLE_TEST_AUC and mf >= MF_TEST_AUC and elapsed < 120
    assert acceptance(7, ok, f"oracle test AUC {oracle:.4f} (>= {ORACLE_TEST_AUC}), MF seed test AUC "
                      f"{mf:.4f} (>= {MF_TEST_AUC}), planted-truth AUC {bayes:.4f}, {elapsed:.1f}s")


# --- 8 ----------------------------------------------------------------------------


def _front_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted((directory / "front").iterdir())}


def test_criterion_8_mini_search(acceptance, planted_ds, tmp_path):
    cfg = evolve.SearchConfig(pop=16, gen=10, train=training.TrainConfig(epochs=10), seed=0)
    start = time.perf_counter()
    first = evolve.run_search(cfg, planted_ds)
    elapsed = time.perf_counter() - start
    evolve.write_results(first, tmp_path / "a")
    second = evolve.run_search(cfg, planted_ds)
    evolve.write_results(second, tmp_path / "b")

    best = [h.best_f1 for h in first.history]
    nondecreasing = all(x <= y for x, y in zip(best, best[1:]))
    levels = len({i.f2 for i in first.front})
    mf_f1 = first.archive.get(genome.canonical_key(genome.seed_tree("MF")))[0]
    top = max(i.f1 for i in first.front)
    identical = _front_bytes(tmp_path / "a") == _front_bytes(tmp_path / "b")
    ok = (elapsed < SEARCH_BUDGET_S and nondecreasing and levels >= MIN_F2_LEVELS
          and top >= mf_f1 - MF_SLACK and identical)
    assert acceptance(8, ok, f"{elapsed:.0f}s (< {SEARCH_BUDGET_S:.0f}), best-f1 nondecreasing={nondecreasing}, "
                      f"{levels} f2 levels (>= {MIN_F2_LEVELS}), best front f1 {top:.4f} vs MF seed "
                      f"{mf_f1:.4f} - {MF_SLACK}, rerun identical={identical}, front size {len(first.front)}")


# --- 9 ----------------------------------------------------------------------------


def test_criterion_9_monotonicity(acceptance, planted_ds):
    rng = np.random.default_rng(9)
    decreases = 0
    checked = 0
    for tree in (genome.seed_tree("NCD"), op("Mul", H_S, H_E)):
        model = training.assemble(tree, planted_ds.N, planted_ds.q.matrix, seed=0)
        training.train(model, planted_ds, training.TrainConfig(epochs=5))
        for _ in range(N_PERTURBATIONS // 2):
            s = rng.integers(planted_ds.N, size=1)
            e = rng.integers(planted_ds.M, size=1)
            y = training.cell_forward(model, s, e, nc.Tape()).data
            bumped = y.copy()
            bumped[0, rng.integers(y.shape[1])] += PERTURBATION
            decreases += int(training.head_predict(model, bumped)[0] < training.head_predict(model, y)[0])
            checked += 1
    assert acceptance(9, decreases == 0 and checked == N_PERTURBATIONS,
                      f"{decreases} probability decreases over {checked} +{PERTURBATION} perturbations")
