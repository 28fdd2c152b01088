"""Numerical self-checks behind ``freedfml diag``."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import bell, five, nets

FD_STEP = 1e-5


def numeric_grad(f, x, h=FD_STEP):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        dn = f(x)
        flat[i] = old
        out[i] = (up - dn) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


OP_CASES = {
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.scale(a, -1.7), [(3, 4)]),
    "relu": (lambda a: ad.relu(a), [(4, 5)]),
    "tanh": (lambda a: ad.tanh(a), [(4, 5)]),
    "log": (lambda a: ad.log(ad.add(ad.mul(a, a), 1.0)), [(3, 4)]),
    "softmax": (lambda a: ad.softmax(a), [(3, 5)]),
    "log_softmax": (lambda a: ad.log_softmax(a), [(3, 5)]),
    "sum": (lambda a: ad.sum(a, axis=1), [(3, 4)]),
    "mean": (lambda a: ad.mean(a, axis=0), [(3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)]),
}


def _op_error(build, shapes, seed):
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal(s) for s in shapes]
    probe = None

    def scalar(values):
        nonlocal probe
        g = ad.Graph()
        ts = [g.leaf(v) for v in values]
        out = build(*ts)
        if probe is None:
            probe = np.random.default_rng([seed, 1]).standard_normal(out.data.shape)
        return g, ts, ad.sum(ad.mul(out, probe))

    g, ts, loss = scalar(xs)
    grads = g.backward(loss)
    worst = 0.0
    for k in range(len(xs)):
        def f(v, k=k):
            vals = list(xs)
            vals[k] = v
            return scalar(vals)[2].item()
        worst = max(worst, rel_error(grads[ts[k]], numeric_grad(f, xs[k])))
    return worst


def _ce_error(seed):
    rng = np.random.default_rng(seed)
    logits = 2 * rng.standard_normal((3, 5))
    labels = rng.integers(0, 5, size=3)
    g = ad.Graph()
    t = g.leaf(logits)
    grad = g.backward(ad.cross_entropy(t, labels))[t]
    return rel_error(grad, numeric_grad(lambda v: ad.cross_entropy(ad.Tensor(v), labels).item(), logits))


def _kl_error(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    w = (rng.random(4) > 0.3).astype(np.float64)
    g = ad.Graph()
    tp, tq = g.leaf(p), g.leaf(q)
    grads = g.backward(ad.kl_divergence(tp, tq, w))
    fp = numeric_grad(lambda v: ad.kl_divergence(ad.Tensor(v), ad.Tensor(q), w).item(), p)
    fq = numeric_grad(lambda v: ad.kl_divergence(ad.Tensor(p), ad.Tensor(v), w).item(), q)
    return max(rel_error(grads[tp], fp), rel_error(grads[tq], fq))


def _jittered(spec, seed):
    # random biases keep inputs away from the ReLU kink at exactly zero,
    # where finite differences are meaningless
    state = nets.init_network(spec, seed)
    state.params += 0.3 * np.random.default_rng([*seed, 9]).standard_normal(state.params.size)
    return state


def _small_nets(seed):
    model = _jittered(nets.classifier_spec((6, 5, 3)), [seed, 1])
    model.params *= 3.0  # sharper teacher, so the agreement gate varies across rows
    learner = _jittered(nets.classifier_spec((6, 4, 3)), [seed, 2])
    return model, learner


def _inversion_error(seed):
    """Inversion loss gradient w.r.t. generator params and latent codes."""
    model, learner = _small_nets(seed)
    spec = nets.NetworkSpec("generator", (3, 5, 6))
    gen = _jittered(spec, [seed, 3])
    z = np.random.default_rng([seed, 4]).standard_normal((6, 3))
    y = five.balanced_labels(3, 2)

    def loss_at(params, zz):
        g = ad.Graph()
        zt = g.leaf(zz)
        layers = nets.bind(spec, params, g)
        x = nets.apply_layers(spec, layers, zt)
        return g, zt, layers, five.inversion_loss(model, learner, x, y)

    g, zt, layers, loss = loss_at(gen.params, z)
    grads = g.backward(loss)
    num_p = numeric_grad(lambda p: loss_at(p, z)[3].item(), gen.params)
    num_z = numeric_grad(lambda zz: loss_at(gen.params, zz)[3].item(), z)
    return max(rel_error(nets.flat_grad(grads, layers), num_p), rel_error(grads[zt], num_z))


def _kd_error(seed):
    model, learner = _small_nets(seed)
    x = np.tanh(np.random.default_rng([seed, 5]).standard_normal((5, 6)))
    _, grad = bell.kd_loss_and_grad(model, learner, x)
    num = numeric_grad(lambda p: bell.kd_loss(model, nets.NetworkState(learner.spec, p), x).item(),
                       learner.params)
    return rel_error(grad, num)


def gradcheck_all(instances=50):
    """Worst relative error per case over ``instances`` seeded instances."""
    rows = []
    cases = [(name, lambda s, b=build, sh=shapes: _op_error(b, sh, s))
             for name, (build, shapes) in OP_CASES.items()]
    cases += [("cross_entropy", _ce_error), ("kl_divergence", _kl_error),
              ("inversion_loss", _inversion_error), ("kd_loss", _kd_error)]
    for name, fn in cases:
        start = time.perf_counter()
        worst = max(fn(seed) for seed in range(instances))
        rows.append({"case": name, "instances": instances, "max_rel_error": worst,
                     "seconds": time.perf_counter() - start})
    return rows


def theorem1_report(seeds=range(5), dim=8, cubic=0.5):
    """Lemma-1 residual slopes on the cubic family plus exactness on pure quadratics."""
    out = []
    for seed in seeds:
        tasks, theta = bell.random_quadratic_pair(dim, seed, cubic=cubic)
        cub = bell.verify_theorem1(tasks, theta)
        qtasks, qtheta = bell.random_quadratic_pair(dim, seed)
        quad = bell.verify_theorem1(qtasks, qtheta)
        out.append({"seed": seed, "slope": cub["slope"], "cubic_rows": cub["rows"],
                    "quadratic_max_residual": quad["max_residual"],
                    "symmetric_correction_rel_err": cub["symmetric_correction_rel_err"]})
    return out
