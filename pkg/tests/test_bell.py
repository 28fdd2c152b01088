import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error

from freedfml import autodiff as ad
from freedfml import bell, five, nets

SPEC = nets.classifier_spec((64, 32, 5))


def _batch(small_pool, n, seed=0):
    rng = np.random.default_rng(seed)
    return [(small_pool.models[i], np.tanh(rng.standard_normal((20, 64)))) for i in range(n)]


def _learner(seed=1, spec=SPEC):
    return nets.init_network(spec, seed)


# ---------------------------------------------------------------- kd loss


def test_kd_self_distillation_is_zero(small_pool):
    m = small_pool.models[0]
    x = np.tanh(np.random.default_rng(0).standard_normal((30, 64)))
    assert abs(bell.kd_loss(m, m.clone(), x).item()) < 1e-12


def test_kd_matches_raw_recomputation(small_pool):
    m, x = _batch(small_pool, 1)[0]
    f = _learner(spec=nets.classifier_spec((64, 64, 5)))
    p = np.exp(nets.forward_classifier(m, x))
    p /= p.sum(1, keepdims=True)
    q = np.exp(nets.forward_classifier(f, x))
    q /= q.sum(1, keepdims=True)
    raw = np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1))
    assert abs(bell.kd_loss(m, f, x).item() - raw) < 1e-12


def test_kd_student_gradient_fd(small_pool):
    m, x = _batch(small_pool, 1)[0]
    spec = nets.classifier_spec((64, 6, 5))
    f = _learner(spec=spec)
    _, g = bell.kd_loss_and_grad(m, f, x)
    num = numeric_grad(lambda p: bell.kd_loss(m, nets.NetworkState(spec, p), x).item(), f.params)
    assert rel_error(g, num) < 1e-4


def test_kd_teacher_is_constant(small_pool):
    # route the teacher through the tape as a leaf and confirm no gradient
    # reaches it: the loss only sees the teacher's logits as a constant
    m, x = _batch(small_pool, 1)[0]
    f = _learner()
    g = ad.Graph()
    teacher_layers = nets.bind(m.spec, m.params, g)
    loss = bell.kd_loss(m, f, x, g)
    grads = g.backward(loss)
    for w, b in teacher_layers:
        assert not np.any(grads[w]) and not np.any(grads[b])
    assert grads.warning


def test_kd_teacher_perturbation_changes_loss_not_gradient_path(small_pool):
    m, x = _batch(small_pool, 1)[0]
    f = _learner()
    moved = m.clone()
    moved.params += 0.1
    assert bell.kd_loss(m, f, x).item() != bell.kd_loss(moved, f, x).item()


def test_kd_dimension_mismatch(small_pool):
    m, x = _batch(small_pool, 1)[0]
    with pytest.raises(ad.ShapeError):
        bell.kd_loss(m, _learner(spec=nets.classifier_spec((64, 8, 4))), x)


# ------------------------------------------------------- reptile algebra


@pytest.mark.parametrize("head", [None, "prototype"])
def test_b1_eps1_is_sgd(small_pool, head):
    batch = _batch(small_pool, 1)
    f = _learner()
    alpha = 0.05
    out, _ = bell.bell_sequence_step(f, batch, alpha, 1.0, 0, head=head)
    g = bell.kd_grad_fn(f, *batch[0], head=head)(bell._theta(f, head))
    expected = bell._theta(f, head) - alpha * g
    np.testing.assert_allclose(bell._theta(out, head), expected, rtol=0, atol=1e-12)


def test_eps_zero_identity(small_pool):
    f = _learner()
    out, _ = bell.bell_sequence_step(f, _batch(small_pool, 4), 0.1, 0.0, 0)
    assert out.params.tobytes() == f.params.tobytes()


def test_erm_b1_equals_bell_b1(small_pool):
    batch = _batch(small_pool, 1)
    f = _learner()
    a, _ = bell.erm_step(f, batch, 0.03)
    b, _ = bell.bell_sequence_step(f, batch, 0.03, 1.0, 0)
    np.testing.assert_allclose(a.params, b.params, rtol=0, atol=1e-12)


def test_erm_gradient_of_mean_is_mean_of_gradients(small_pool):
    batch = _batch(small_pool, 3)
    f = _learner()
    lr = 0.01
    out, _ = bell.erm_step(f, batch, lr)

    def mean_loss(p):
        st = nets.NetworkState(SPEC, p)
        g = ad.Graph()
        layers = nets.bind(SPEC, p, g)
        total = sum((bell.kd_loss(m, st, x, g, layers) for m, x in batch), g.constant(np.array(0.0)))
        return total * (1.0 / len(batch)), g, layers

    loss, g, layers = mean_loss(f.params)
    grad = nets.flat_grad(g.backward(loss), layers)
    np.testing.assert_allclose(out.params, f.params - lr * grad, rtol=0, atol=1e-12)


def test_sequence_is_fold_of_single_steps(small_pool):
    batch = _batch(small_pool, 3)
    f = _learner()
    alpha, eps, seed = 0.05, 0.7, 4
    out, _ = bell.bell_sequence_step(f, batch, alpha, eps, seed)
    order = np.random.default_rng(seed).permutation(3)
    tilde = f.params.copy()
    for i in order:
        m, x = batch[i]
        _, g = bell.kd_loss_and_grad(m, nets.NetworkState(SPEC, tilde), x)
        tilde = tilde - alpha * g
    expected = f.params + eps * (tilde - f.params)
    assert out.params.tobytes() == expected.tobytes()


def test_record_is_pure_observer(small_pool):
    batch = _batch(small_pool, 4)
    f = _learner()
    a, rec = bell.bell_sequence_step(f, batch, 0.05, 0.5, 1, head="prototype", record=True)
    b, none = bell.bell_sequence_step(f, batch, 0.05, 0.5, 1, head="prototype", record=False)
    assert a.params.tobytes() == b.params.tobytes()
    assert none is None and len(rec.pairs) == 6


def test_quadratic_sequential_oracle():
    tasks, theta = bell.random_quadratic_pair(6, 0)
    alpha, eps = 0.1, 0.5
    new, tilde = bell.reptile_sequence(theta, [t.grad for t in tasks], alpha, eps)
    # hand-rolled: step on task 0 with its closed form gradient, then task 1
    t1 = theta - alpha * (tasks[0].A @ (theta - tasks[0].c))
    t2 = t1 - alpha * (tasks[1].A @ (t1 - tasks[1].c))
    np.testing.assert_allclose(tilde, t2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(new, theta + eps * (t2 - theta), rtol=0, atol=1e-12)


def test_erm_bell_gap_vanishes_quadratically():
    tasks, theta = bell.random_quadratic_pair(5, 2)
    fns = [t.grad for t in tasks]
    ratios = []
    for alpha in (1e-2, 1e-3, 1e-4):
        bl, _ = bell.reptile_sequence(theta, fns, alpha, 1.0)
        erm, _ = bell.erm_update(theta, fns, 2 * alpha)
        ratios.append(np.linalg.norm(bl - erm) / alpha ** 2)
    # gap / alpha^2 tends to |A_1 A_0 g_0|, a constant
    assert abs(ratios[1] / ratios[2] - 1) < 0.02
    expected = np.linalg.norm(tasks[1].A @ tasks[0].grad(theta))
    assert abs(ratios[2] / expected - 1) < 1e-3


def test_non_finite_gradient_names_task():
    bad = [lambda t: np.ones_like(t), lambda t: np.full_like(t, np.nan)]
    with pytest.raises(bell.AlignmentError, match="task 1"):
        bell.reptile_sequence(np.zeros(3), bad, 0.1, 1.0)
    with pytest.raises(bell.AlignmentError, match="task 1"):
        bell.erm_update(np.zeros(3), bad, 0.1)


def test_empty_batch():
    with pytest.raises(ValueError):
        bell.bell_sequence_step(_learner(), [], 0.1, 1.0, 0)
    with pytest.raises(ValueError):
        bell.erm_step(_learner(), [], 0.1)


# ------------------------------------------------------------- alignment


def test_alignment_identical_and_orthogonal():
    g = np.array([1.0, 2.0, -1.0])
    rec = bell.alignment_record([g, g, g])
    assert rec.mean == pytest.approx(6.0) and rec.min_pair == rec.max_pair == 6.0
    rec = bell.alignment_record([np.array([1.0, 0.0]), np.array([0.0, 3.0])])
    assert rec.mean == 0.0


@pytest.mark.parametrize("b", [2, 3, 4, 6])
def test_alignment_pair_count(b):
    rec = bell.alignment_record(list(np.random.default_rng(b).standard_normal((b, 4))))
    assert len(rec.pairs) == b * (b - 1) // 2


def test_track_alignment_skips_missing():
    rows = [{"epoch": 0, "mean_inner_product": "0.5"}, {"epoch": 1, "mean_inner_product": "nan"}]
    series = bell.track_alignment(rows)
    assert [(r.epoch, r.mean) for r in series] == [(0, 0.5)]


# ------------------------------------------------------ Theorem-1 harness


def test_pure_quadratic_expansion_exact():
    for seed in range(5):
        tasks, theta = bell.random_quadratic_pair(8, seed, identity=True)
        assert bell.verify_theorem1(tasks, theta)["max_residual"] < 1e-12
        tasks, theta = bell.random_quadratic_pair(8, seed)
        assert bell.verify_theorem1(tasks, theta)["max_residual"] < 1e-12


def test_cubic_family_slope_two():
    for seed in range(5):
        tasks, theta = bell.random_quadratic_pair(8, seed, cubic=0.5)
        out = bell.verify_theorem1(tasks, theta)
        assert abs(out["slope"] - 2.0) < 0.1


def test_symmetrised_correction_is_inner_product_gradient():
    tasks, theta = bell.random_quadratic_pair(6, 3, cubic=0.3)
    assert bell.verify_theorem1(tasks, theta)["symmetric_correction_rel_err"] < 1e-6


def test_identical_tasks_correction():
    (t, _), theta = bell.random_quadratic_pair(5, 1)
    alpha = 1e-3
    g = t.grad(theta)
    corr = -alpha * t.hess(theta) @ g
    # grad ||g||^2 = 2 H g: one order gives half, both orders the full term
    grad_norm_sq = bell.inner_product_gradient_fd(t, t, theta)
    np.testing.assert_allclose(corr, -0.5 * alpha * grad_norm_sq, rtol=1e-6)
    assert corr @ grad_norm_sq < 0


def test_non_pd_rejected():
    with pytest.raises(ValueError):
        bell.QuadraticTask(np.diag([1.0, -1.0]), np.zeros(2))
    with pytest.raises(ValueError):
        bell.QuadraticTask(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))


def test_recovered_task_can_feed_kd(small_pool):
    gen = nets.init_network(nets.generator_spec(), 0)
    f = _learner()
    task, _ = five.adapt_generator(gen, small_pool.models[0], f, 2, 0)
    out, rec = bell.bell_sequence_step(f, [(small_pool.models[0], task.x_hat)], 0.1, 1.0, 0)
    assert not np.array_equal(out.params, f.params)
