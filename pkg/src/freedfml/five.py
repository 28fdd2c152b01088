"""Fast task recovery with a meta-generator.

For each pre-trained model a clone of the shared generator, together with
a freshly drawn latent code, takes ``k`` joint gradient steps on the
inversion loss::

    L_G = CE(M(x), y) - mean_j eta_j * KL(M(x_j) || F(x_j))

where ``eta_j`` is 1 when the model and the learner agree on ``argmax``
for sample ``j`` and 0 otherwise (a constant gate).  The shared generator
is then moved by the batch-mean gradient of the post-adaptation loss,
evaluated at each adapted generator (first-order meta-update).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import nets


class InversionError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclasses.dataclass
class RecoveredTask:
    x_hat: np.ndarray
    y: np.ndarray
    source: int
    steps: int
    backward_passes: int


@dataclasses.dataclass
class AdaptationTrace:
    losses: list
    z: np.ndarray
    gen_params: np.ndarray
    outer_grad: np.ndarray
    backward_passes: int = 0
    backward_flops: int = 0
    forward_flops: int = 0


def balanced_labels(way, per_class):
    return np.repeat(np.arange(way), per_class)


def agreement_gate(model_logits, learner_logits):
    return (np.argmax(model_logits, axis=1) == np.argmax(learner_logits, axis=1)).astype(np.float64)


def inversion_loss(model, learner, x_hat, y):
    """Inversion loss on a graph tensor ``x_hat`` (model and learner are constants)."""
    y = np.asarray(y)
    graph = x_hat.graph if isinstance(x_hat, ad.Tensor) and x_hat.graph is not None else ad.Graph()
    if not isinstance(x_hat, ad.Tensor) or x_hat.graph is None:
        x_hat = graph.constant(x_hat.data if isinstance(x_hat, ad.Tensor) else x_hat)
    if learner.spec.output_dim != model.spec.output_dim:
        raise ad.ShapeError("inversion_loss", (model.spec.output_dim,), (learner.spec.output_dim,))
    m_logits = nets.apply_layers(model.spec, nets.bind(model.spec, model.params, graph, False), x_hat)
    f_logits = nets.apply_layers(learner.spec, nets.bind(learner.spec, learner.params, graph, False), x_hat)
    ce = ad.cross_entropy(m_logits, y)
    eta = agreement_gate(m_logits.data, f_logits.data)
    return ce - ad.kl_divergence(m_logits, f_logits, eta)


def _loss_and_grads(gen, z, model, learner, y):
    g = ad.Graph()
    z_t = g.leaf(z)
    layers = nets.bind(gen.spec, gen.params, g)
    x_hat = nets.apply_layers(gen.spec, layers, z_t)
    loss = inversion_loss(model, learner, x_hat, y)
    grads = g.backward(loss)
    return loss.item(), grads[z_t], nets.flat_grad(grads, layers), x_hat.data, g


def adapt_generator(meta_gen, model, learner, k, seed, *, lr_gen=0.01, lr_z=0.1,
                    per_class=10, z=None, source=-1):
    """k-step joint adaptation of (Z, theta_G) for one pre-trained model.

    Returns the recovered task (data generated by the adapted generator)
    and a trace holding the k+1 losses and the outer gradient evaluated
    at the adapted parameters.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    way = model.spec.output_dim
    y = balanced_labels(way, per_class)
    z = rng.standard_normal((len(y), meta_gen.spec.input_dim)) if z is None else np.array(z, dtype=np.float64)
    gen = meta_gen.clone()
    trace = AdaptationTrace([], z, gen.params, None)
    for _ in range(k):
        loss, gz, gp, _, graph = _loss_and_grads(gen, z, model, learner, y)
        trace.losses.append(loss)
        trace.backward_passes += 1
        trace.backward_flops += graph.backward_flops
        trace.forward_flops += graph.forward_flops
        if not np.isfinite(loss) or not (np.all(np.isfinite(gz)) and np.all(np.isfinite(gp))):
            raise InversionError(f"non-finite inversion loss at step {len(trace.losses) - 1}", trace)
        z = z - lr_z * gz
        gen.params -= lr_gen * gp
    loss, _, gp, x_hat, graph = _loss_and_grads(gen, z, model, learner, y)
    trace.losses.append(loss)
    trace.forward_flops += graph.forward_flops
    if not np.isfinite(loss):
        raise InversionError("non-finite post-adaptation loss", trace)
    trace.z = z
    trace.gen_params = gen.params
    trace.outer_grad = gp
    task = RecoveredTask(x_hat, y, source, k, k)
    return task, trace


def meta_generator_outer_step(meta_gen, traces, gamma):
    """theta_G <- theta_G - gamma * mean_i grad_i (grads taken at adapted params)."""
    if not traces:
        raise ValueError("empty batch for meta-generator update")
    mean_grad = np.mean([t.outer_grad for t in traces], axis=0)
    out = meta_gen.clone()
    out.params -= gamma * mean_grad
    return out


def invert_from_scratch(gen_spec, model, learner, iterations, seed, **kw):
    """Baseline inversion: a freshly initialised generator trained for ``iterations`` steps."""
    gen = nets.init_network(gen_spec, seed)
    return adapt_generator(gen, model, learner, iterations, [seed, 1], **kw)


def count_inversion_cost(trace):
    """(backward passes, backward MACs) spent on adaptation."""
    return trace.backward_passes, trace.backward_flops
