"""FIFO memory bank of recovered class groups and cross-task replay."""

from __future__ import annotations

import collections
import dataclasses

import numpy as np

from . import autodiff as ad
from . import learner as lrn
from . import nets
from .tasks import Episode


class BankWarmupError(RuntimeError):
    """The bank cannot yet supply the requested episode."""


class ReplayError(RuntimeError):
    pass


@dataclasses.dataclass
class ClassGroup:
    class_id: int
    domain: int
    samples: np.ndarray
    counter: int
    source: int = -1


class MemoryBank:
    def __init__(self, capacity=200):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.groups = collections.deque()
        self._counter = 0

    def __len__(self):
        return len(self.groups)

    def push(self, class_id, domain, samples, source=-1):
        self.groups.append(ClassGroup(int(class_id), int(domain), np.array(samples), self._counter, source))
        self._counter += 1
        while len(self.groups) > self.capacity:
            self.groups.popleft()

    def stats(self):
        ages = [self._counter - 1 - g.counter for g in self.groups]
        return {
            "size": len(self.groups),
            "classes": len({g.class_id for g in self.groups}),
            "age_hist": np.histogram(ages, bins=[0, 4, 16, 64, 256, 10**9])[0].tolist() if ages else [],
        }


def bank_insert(bank, task, class_labels, domain=0, source=-1):
    """One group per local class; local label i maps to ``class_labels[i]``."""
    for local, cid in enumerate(class_labels):
        bank.push(cid, domain, task.x_hat[task.y == local], source)
    return bank


def sample_replay_episode(bank, way, shot, query, seed):
    rng = np.random.default_rng(seed)
    by_class = collections.defaultdict(list)
    for g in bank.groups:
        if len(g.samples) >= shot + query:
            by_class[g.class_id].append(g)
    ids = sorted(by_class)
    if len(ids) < way:
        raise BankWarmupError(f"bank offers {len(ids)} usable classes, episode needs {way}")
    chosen = rng.choice(ids, size=way, replace=False)
    sx, qx = [], []
    for cid in chosen:
        groups = by_class[int(cid)]
        g = groups[rng.integers(len(groups))]
        idx = rng.permutation(len(g.samples))
        sx.append(g.samples[idx[:shot]])
        qx.append(g.samples[idx[shot:shot + query]])
    return Episode(way, shot, query,
                   np.concatenate(sx), np.repeat(np.arange(way), shot),
                   np.concatenate(qx), np.repeat(np.arange(way), query),
                   tuple(int(c) for c in chosen))


def ce_grad(state, x, y):
    g = ad.Graph()
    layers = nets.bind(state.spec, state.params, g)
    loss = ad.cross_entropy(nets.apply_layers(state.spec, layers, g.constant(x)), y)
    return loss.item(), nets.flat_grad(g.backward(loss), layers)


def replay_update(learner, episode, inner_steps, inner_lr, outer_lr, *, head=None, temperature=1.0):
    """First-order inner-adapt / outer-evaluate update on one replay episode.

    Inner loop: ``inner_steps`` CE steps on the support set from a clone.
    Outer: the query CE gradient at the adapted point, applied to the
    original parameters (trunk only when a fresh head is used).
    Returns ``(updated learner, query loss at the adapted point)``.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    adapted = learner.clone()
    if head is not None:
        adapted = lrn.with_head(adapted, lrn.make_head(head, adapted, episode.support_x,
                                                       episode.support_y, temperature))
    for _ in range(inner_steps):
        loss, g = ce_grad(adapted, episode.support_x, episode.support_y)
        if not np.isfinite(loss):
            raise ReplayError(f"non-finite support loss on episode {episode.class_ids}")
        adapted.params -= inner_lr * g
    loss, g = ce_grad(adapted, episode.query_x, episode.query_y)
    if not np.isfinite(loss):
        raise ReplayError(f"non-finite query loss on episode {episode.class_ids}")
    out = learner.clone()
    if head is None:
        out.params -= outer_lr * g
    else:
        cut = learner.spec.head_offset()
        out.params[:cut] -= outer_lr * g[:cut]
    return out, loss
