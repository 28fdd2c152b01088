"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Seeds below are pinned; the heavy criteria share one cache of trained
arms so each (arm, seed) is meta-trained once per session.
"""

import time

import numpy as np
import pytest

from freedfml import bell, diagnostics, five, nets, pipeline, tasks
from freedfml import pool as pool_mod

SEEDS = (0, 1, 2, 3, 4)
SHOTS = (1, 5)
EVAL_TASKS = 600


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="module")
def desk():
    return pipeline.desk_config()


@pytest.fixture(scope="module")
def bench(desk):
    universe = pipeline.build_universe(desk)
    return universe, pipeline.build_pool(universe, desk)


_RUNS = {}


def trained(bench, cfg):
    """Cached (state, {shot: EvalReport}) per distinct config."""
    key = pipeline.dump_config(cfg)
    if key not in _RUNS:
        universe, meta = bench
        res = pipeline.run_arm(cfg, meta, universe, shots=SHOTS, eval_tasks=EVAL_TASKS)
        _RUNS[key] = (res.state, res.reports)
    return _RUNS[key]


def medians(bench, desk, arm, **kw):
    out = {k: [] for k in SHOTS}
    for s in SEEDS:
        _, reps = trained(bench, desk.replace(arm=arm, seed=s, **kw))
        for k in SHOTS:
            out[k].append(reps[k].mean)
    return {k: float(np.median(v)) for k, v in out.items()}, out


# ------------------------------------------------------------------ 1


def test_1_gradient_correctness(capsys):
    start = time.perf_counter()
    rows = diagnostics.gradcheck_all(instances=50)
    elapsed = time.perf_counter() - start
    worst = max(rows, key=lambda r: r["max_rel_error"])
    ok = worst["max_rel_error"] < 1e-4 and all(r["instances"] >= 50 for r in rows) and elapsed < 10
    report(capsys, 1, ok, f"{len(rows)} cases x 50 instances, worst {worst['case']} "
                          f"{worst['max_rel_error']:.2e}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2


def test_2_theorem1(capsys):
    start = time.perf_counter()
    rows = diagnostics.theorem1_report()
    elapsed = time.perf_counter() - start
    slopes = [r["slope"] for r in rows]
    exact = max(r["quadratic_max_residual"] for r in rows)
    for seed in range(5):
        tasks_i, theta = bell.random_quadratic_pair(8, seed, identity=True)
        exact = max(exact, bell.verify_theorem1(tasks_i, theta)["max_residual"])
    ok = all(abs(s - 2.0) <= 0.1 for s in slopes) and exact < 1e-12 and elapsed < 5
    report(capsys, 2, ok, f"slopes {min(slopes):.4f}..{max(slopes):.4f}, "
                          f"quadratic residual {exact:.1e}, {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ 3


def test_3_reptile_algebra(capsys, small_pool):
    rng = np.random.default_rng(0)
    spec = nets.classifier_spec((64, 32, 5))
    learner = nets.init_network(spec, 1)
    batch1 = [(small_pool.models[0], np.tanh(rng.standard_normal((20, 64))))]
    alpha = 0.05
    out, _ = bell.bell_sequence_step(learner, batch1, alpha, 1.0, 0)
    _, g = bell.kd_loss_and_grad(batch1[0][0], learner, batch1[0][1])
    sgd_err = float(np.max(np.abs(out.params - (learner.params - alpha * g))))

    batch4 = batch1 + [(small_pool.models[i], np.tanh(rng.standard_normal((20, 64)))) for i in (1, 2, 3)]
    same, _ = bell.bell_sequence_step(learner, batch4, alpha, 0.0, 0)
    identity = same.params.tobytes() == learner.params.tobytes()

    quad_err = 0.0
    for seed in range(5):
        qtasks, theta = bell.random_quadratic_pair(6, seed)
        new, tilde = bell.reptile_sequence(theta, [t.grad for t in qtasks], 0.1, 0.5)
        t1 = theta - 0.1 * qtasks[0].A @ (theta - qtasks[0].c)
        t2 = t1 - 0.1 * qtasks[1].A @ (t1 - qtasks[1].c)
        quad_err = max(quad_err, float(np.max(np.abs(tilde - t2))),
                       float(np.max(np.abs(new - (theta + 0.5 * (t2 - theta))))))
    ok = sgd_err < 1e-12 and identity and quad_err < 1e-12
    report(capsys, 3, ok, f"b=1,eps=1 vs SGD {sgd_err:.1e}; eps=0 bit-identical {identity}; "
                          f"quadratic oracle {quad_err:.1e}")
    assert ok


# ------------------------------------------------------------------ 4


def test_4_speedup_structure(capsys, universe, small_pool, desk):
    start = time.perf_counter()
    learner = nets.init_network(desk.learner_spec, 0)
    gen = nets.init_network(desk.generator_spec, 0)
    five_passes, scratch_passes, five_flops, scratch_flops = [], [], [], []
    for i, model in enumerate(small_pool.models):
        _, tr = five.adapt_generator(gen, model, learner, desk.k, i, lr_gen=desk.gen_lr, lr_z=desk.z_lr)
        _, base = five.invert_from_scratch(desk.generator_spec, model, learner, desk.scratch_iterations, i,
                                           lr_gen=desk.gen_lr, lr_z=desk.z_lr)
        p, f = five.count_inversion_cost(tr)
        five_passes.append(p)
        five_flops.append(f)
        p, f = five.count_inversion_cost(base)
        scratch_passes.append(p)
        scratch_flops.append(f)
    elapsed = time.perf_counter() - start
    ratio = sum(scratch_passes) / sum(five_passes)
    flop_ratio = sum(scratch_flops) / sum(five_flops)
    ok = ratio >= 20 and ratio == 40 and len(small_pool) == 10 and elapsed < 120
    report(capsys, 4, ok, f"backward passes {sum(scratch_passes)}/{sum(five_passes)} = {ratio:g}x "
                          f"(MAC ratio {flop_ratio:g}x) over {len(small_pool)} models, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 6 (5 and 7 reuse its runs)


@pytest.mark.slow
def test_6_ablation_ordering(capsys, bench, desk):
    start = time.perf_counter()
    med, raw = {}, {}
    for arm in ("baseline", "erm", "sequence", "free"):
        med[arm], raw[arm] = medians(bench, desk, arm)
    elapsed = time.perf_counter() - start
    ok = True
    parts = []
    for k in SHOTS:
        order = med["baseline"][k] < med["erm"][k] < med["free"][k] and med["sequence"][k] < med["free"][k]
        wins = sum(f > e for f, e in zip(raw["free"][k], raw["erm"][k]))
        # a one-sided sign test over 5 seeds reaches p = 1/32 only when free wins every seed
        ok &= order and wins == len(SEEDS)
        parts.append(f"K={k}: " + " ".join(f"{a}={100 * med[a][k]:.2f}" for a in med)
                     + f" free>erm on {wins}/5 seeds")
    ok &= elapsed < 3600
    report(capsys, 6, ok, "; ".join(parts) + f"; {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_5_alignment(capsys, bench, desk):
    start = time.perf_counter()
    late = {"free": [], "erm": []}
    for arm in late:
        for s in SEEDS:
            state, _ = trained(bench, desk.replace(arm=arm, seed=s))
            recs = [rec.mean for _, rec in state.alignment]
            window = recs[-max(1, len(recs) // 5):]
            late[arm].append(float(np.mean(window)))
    elapsed = time.perf_counter() - start
    bell_med, erm_med = np.median(late["free"]), np.median(late["erm"])
    ok = bell_med > erm_med
    report(capsys, 5, ok, f"late-window inner product median BelL {bell_med:.3e} vs ERM {erm_med:.3e} "
                          f"(per seed BelL {np.round(late['free'], 6).tolist()}, "
                          f"ERM {np.round(late['erm'], 6).tolist()}); {elapsed / 60:.1f} min incl. training")
    assert ok


@pytest.mark.slow
def test_7_shot_monotonicity(capsys, bench, desk):
    med, _ = medians(bench, desk, "free")
    ok = med[5] >= med[1]
    report(capsys, 7, ok, f"free arm medians 1-shot {100 * med[1]:.2f}, 5-shot {100 * med[5]:.2f}")
    assert ok


# ------------------------------------------------------------------ 8


def test_8_determinism_and_data_freedom(capsys, small_pool, desk, monkeypatch):
    cfg = desk.replace(epochs=5)
    u = tasks.build_universe(cfg.universe_config, cfg.universe_seed)
    u.trap("train")
    reads = []
    real_sample_class = tasks.sample_class

    def trapped_sample_class(cls, count, seed):
        reads.append(cls.class_id)
        return real_sample_class(cls, count, seed)

    # every class read from any universe goes through sample_class
    monkeypatch.setattr(tasks, "sample_class", trapped_sample_class)
    fired = False
    runs = []
    try:
        for arm in ("free", "free", "erm", "sequence", "baseline"):
            trace = []
            pipeline.train(small_pool, cfg.replace(arm=arm),
                           callback=lambda s: trace.append(s.learner.params.tobytes()))
            runs.append(trace)
    except tasks.DataAccessError:
        fired = True
    identical = len(runs) == 5 and runs[0] == runs[1]
    armed = False
    try:
        tasks.sample_episode(u, "train", 5, 1, 1, 0)
    except tasks.DataAccessError:
        armed = True
    ok = identical and not fired and not reads and armed
    report(capsys, 8, ok, f"bit-identical reruns {identical}; trap armed {armed}, fired {fired}, "
                          f"class reads during meta-training {len(reads)}")
    assert ok


# ------------------------------------------------------------------ 9


def test_9_serialization(capsys, small_pool, tmp_path, desk):
    small_pool.save(tmp_path / "pool")
    loaded = pool_mod.ModelPool.load(tmp_path / "pool")
    pool_ok = all(a.params.tobytes() == b.params.tobytes() and a.class_labels == b.class_labels
                  for a, b in zip(small_pool.models, loaded.models))
    learner = nets.init_network(desk.learner_spec, 5)
    nets.save_checkpoint(learner, tmp_path / "learner.net")
    learner_ok = nets.load_checkpoint(tmp_path / "learner.net").params.tobytes() == learner.params.tobytes()

    blob = (tmp_path / "learner.net").read_bytes()
    errors = {}
    for name, bad in [("checksum", blob[:-3] + bytes([blob[-3] ^ 1]) + blob[-2:]),
                      ("truncation", blob[:-16]),
                      ("version", blob.replace(b"format-version = 1", b"format-version = 2"))]:
        try:
            nets.parse_checkpoint(bad)
            errors[name] = None
        except nets.CheckpointError as exc:
            errors[name] = type(exc)
    structured = errors == {"checksum": nets.ChecksumError, "truncation": nets.TruncationError,
                            "version": nets.VersionError}
    ok = pool_ok and learner_ok and structured
    report(capsys, 9, ok, f"pool round-trip {pool_ok}, learner round-trip {learner_ok}, "
                          f"errors {{{', '.join(f'{k}: {v.__name__ if v else None}' for k, v in errors.items())}}}")
    assert ok


# ------------------------------------------------------------------ 10


@pytest.mark.slow
def test_10_multi_domain_multi_arch(capsys, desk):
    start = time.perf_counter()
    cfg = desk.replace(n_domains=3, pool_archs=";".join(",".join(map(str, a)) for a in pool_mod.MULTI_ARCHS))
    universe = pipeline.build_universe(cfg)
    meta = pipeline.build_pool(universe, cfg)
    domains = sorted({i.domain for i in meta.info})
    archs = sorted({i.arch for i in meta.info})
    bench = (universe, meta)
    free, free_raw = medians(bench, cfg, "free")
    rand, rand_raw = medians(bench, cfg, "random")
    elapsed = time.perf_counter() - start
    ok = all(free[k] > rand[k] for k in SHOTS) and domains == [0, 1, 2] and len(archs) == 3
    report(capsys, 10, ok, "; ".join(f"K={k}: free {100 * free[k]:.2f} vs random {100 * rand[k]:.2f}"
                                     for k in SHOTS) + f"; domains {domains}, archs {archs}; "
                                                       f"{elapsed / 60:.1f} min")
    assert ok
