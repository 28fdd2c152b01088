"""Sequential multi-task distillation with a Reptile outer update.

The meta-learner visits the recovered tasks of a batch one after another,
taking a single distillation step on each, then moves the shared
parameters a fraction ``eps`` of the way to the result::

    theta_tilde = theta
    for i in order:  theta_tilde -= alpha * grad_i(theta_tilde)
    theta += eps * (theta_tilde - theta)

To first order in ``alpha`` this is plain gradient descent on the mean
loss; the second-order term rewards agreement between task gradients
(see :func:`verify_theorem1`).  The ERM ablation takes one step on the
mean loss instead.
"""

from __future__ import annotations

import dataclasses
from itertools import combinations

import numpy as np

from . import autodiff as ad
from . import learner as lrn
from . import nets
from .kernels import softmax_rows


class AlignmentError(RuntimeError):
    pass


@dataclasses.dataclass
class AlignmentRecord:
    epoch: int
    mean: float
    pairs: dict

    @property
    def min_pair(self):
        return min(self.pairs.values()) if self.pairs else float("nan")

    @property
    def max_pair(self):
        return max(self.pairs.values()) if self.pairs else float("nan")


def alignment_record(grads, epoch=-1):
    pairs = {(i, j): float(grads[i] @ grads[j]) for i, j in combinations(range(len(grads)), 2)}
    mean = float(np.mean(list(pairs.values()))) if pairs else float("nan")
    return AlignmentRecord(epoch, mean, pairs)


# ------------------------------------------------------------ generic core


def reptile_sequence(theta, grad_fns, alpha, eps, order=None):
    """Returns ``(new_theta, theta_tilde)``; ``grad_fns[i](params) -> gradient``."""
    theta = np.asarray(theta, dtype=np.float64)
    order = range(len(grad_fns)) if order is None else order
    tilde = theta.copy()
    for i in order:
        g = grad_fns[i](tilde)
        if not np.all(np.isfinite(g)):
            raise AlignmentError(f"non-finite gradient on task {i}")
        tilde = tilde - alpha * g
    return theta + eps * (tilde - theta), tilde


def erm_update(theta, grad_fns, lr):
    grads = [fn(theta) for fn in grad_fns]
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise AlignmentError(f"non-finite gradient on task {i}")
    return theta - lr * np.mean(grads, axis=0), grads


# ------------------------------------------------------------ distillation


def kd_loss(model, learner, x_hat, graph=None, learner_layers=None):
    """KL(softmax(M(x)) || softmax(F(x))), batch mean; teacher logits are constants."""
    if learner.spec.output_dim != model.spec.output_dim:
        raise ad.ShapeError("kd_loss", (model.spec.output_dim,), (learner.spec.output_dim,))
    graph = graph or ad.Graph()
    teacher = nets.forward_classifier(model, x_hat)
    if learner_layers is None:
        learner_layers = nets.bind(learner.spec, learner.params, graph)
    student = nets.apply_layers(learner.spec, learner_layers, graph.constant(x_hat))
    return ad.kl_divergence(graph.constant(teacher), student)


def kd_loss_and_grad(model, learner, x_hat):
    g = ad.Graph()
    layers = nets.bind(learner.spec, learner.params, g)
    loss = kd_loss(model, learner, x_hat, g, layers)
    return loss.item(), nets.flat_grad(g.backward(loss), layers)


def teacher_probs(model, x_hat):
    return softmax_rows(nets.forward_classifier(model, x_hat))


def kd_grad_fn(learner, model, x_hat, head=None, temperature=1.0, losses=None):
    """Gradient closure for one task.

    With ``head=None`` the full learner vector is trained.  Otherwise the
    closure works on the trunk only and builds a fresh head of the given
    kind at every evaluation point.
    """
    spec = learner.spec
    if head is None:
        def fn(params):
            loss, g = kd_loss_and_grad(model, nets.NetworkState(spec, params), x_hat)
            if losses is not None:
                losses.append(loss)
            return g
        return fn

    soft = teacher_probs(model, x_hat)
    n_head = lrn.head_size(spec)

    def fn(trunk_params):
        base = nets.NetworkState(spec, np.concatenate([trunk_params, np.zeros(n_head)]))
        state = lrn.with_head(base, lrn.make_head(head, base, x_hat, soft, temperature))
        loss, g = kd_loss_and_grad(model, state, x_hat)
        if losses is not None:
            losses.append(loss)
        return g[:spec.head_offset()]
    return fn


def _theta(learner, head):
    return learner.params.copy() if head is None else lrn.trunk(learner.params, learner.spec).copy()


def _rebuild(learner, theta, head):
    out = learner.clone()
    if head is None:
        out.params = theta
    else:
        out.params[:learner.spec.head_offset()] = theta
    return out


def bell_sequence_step(learner, batch, alpha, eps, seed, *, head=None, temperature=1.0,
                       epoch=-1, record=True, losses=None):
    """One BelL update on ``batch = [(model, x_hat), ...]``.

    Returns ``(updated learner, AlignmentRecord or None)``.  The record
    uses gradients at the original parameters and never feeds the update.
    """
    if not batch:
        raise ValueError("empty task batch")
    fns = [kd_grad_fn(learner, m, x, head, temperature, losses) for m, x in batch]
    theta = _theta(learner, head)
    order = np.random.default_rng(seed).permutation(len(batch))
    new_theta, _ = reptile_sequence(theta, fns, alpha, eps, order)
    rec = None
    if record:
        probe = [kd_grad_fn(learner, m, x, head, temperature) for m, x in batch]
        rec = alignment_record([fn(theta) for fn in probe], epoch)
    return _rebuild(learner, new_theta, head), rec


def erm_step(learner, batch, lr, *, head=None, temperature=1.0, epoch=-1, losses=None):
    """One gradient step on the mean distillation loss; record comes for free."""
    if not batch:
        raise ValueError("empty task batch")
    fns = [kd_grad_fn(learner, m, x, head, temperature, losses) for m, x in batch]
    new_theta, grads = erm_update(_theta(learner, head), fns, lr)
    return _rebuild(learner, new_theta, head), alignment_record(grads, epoch)


def track_alignment(rows):
    """Alignment series from metrics rows (dicts with epoch/arm/mean_inner_product)."""
    return [AlignmentRecord(int(r["epoch"]), float(r["mean_inner_product"]), {})
            for r in rows if r.get("mean_inner_product") not in (None, "", "nan")]


# ------------------------------------------------------- Theorem-1 harness


@dataclasses.dataclass
class QuadraticTask:
    """``0.5 (t-c)^T A (t-c) + cubic/6 * sum((t-c)^3)``; ``cubic=0`` is a pure quadratic."""

    A: np.ndarray
    c: np.ndarray
    cubic: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if not np.allclose(self.A, self.A.T):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(self.A).min() <= 0:
            raise ValueError("A must be positive definite")

    def loss(self, t):
        d = t - self.c
        return 0.5 * d @ self.A @ d + self.cubic / 6.0 * np.sum(d ** 3)

    def grad(self, t):
        d = t - self.c
        return self.A @ d + 0.5 * self.cubic * d ** 2

    def hess(self, t):
        return self.A + self.cubic * np.diag(t - self.c)


def random_quadratic_pair(dim, seed, cubic=0.0, identity=False):
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(2):
        if identity:
            a = np.eye(dim)
        else:
            m = rng.standard_normal((dim, dim))
            a = m @ m.T / dim + 0.5 * np.eye(dim)
        tasks.append(QuadraticTask(a, rng.standard_normal(dim), cubic))
    return tasks, rng.standard_normal(dim)


def lemma1_residual(task_i, task_j, theta, alpha):
    """Gradient of task i after one step on task j, minus its first-order expansion."""
    gj = task_j.grad(theta)
    exact = task_i.grad(theta - alpha * gj)
    expansion = task_i.grad(theta) - alpha * task_i.hess(theta) @ gj
    return exact - expansion


def inner_product_gradient_fd(task_i, task_j, theta, h=1e-6):
    """Central-difference gradient of ``grad_i . grad_j`` (independent of Hessians)."""
    out = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        up = task_i.grad(theta + e) @ task_j.grad(theta + e)
        dn = task_i.grad(theta - e) @ task_j.grad(theta - e)
        out[k] = (up - dn) / (2 * h)
    return out


def verify_theorem1(tasks, theta, alphas=(1e-1, 3e-2, 1e-2, 3e-3, 1e-3)):
    """Residual table and log-log slope for the Lemma-1 expansion.

    Also returns the order-symmetrised correction check: the corrections
    for both task orders sum to ``-alpha * grad(g_i . g_j)``.
    """
    ti, tj = tasks
    rows = []
    for a in alphas:
        r = lemma1_residual(ti, tj, theta, a)
        rows.append({"alpha": a, "residual": float(np.linalg.norm(r))})
    res = np.array([r["residual"] for r in rows])
    if np.all(res > 0):
        slope = float(np.polyfit(np.log(alphas), np.log(res), 1)[0])
    else:
        slope = float("nan")
    a = alphas[-1]
    corr_ij = -a * ti.hess(theta) @ tj.grad(theta)
    corr_ji = -a * tj.hess(theta) @ ti.grad(theta)
    target = -a * inner_product_gradient_fd(ti, tj, theta)
    sym_err = float(np.linalg.norm(corr_ij + corr_ji - target) / max(np.linalg.norm(target), 1e-300))
    return {"rows": rows, "slope": slope, "max_residual": float(res.max()),
            "symmetric_correction_rel_err": sym_err}
