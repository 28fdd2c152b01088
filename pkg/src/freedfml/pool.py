"""Pre-trained model pool: supervised N-way classifiers on meta-train classes."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets

DEFAULT_ARCHS = ((64, 64, 5),)
MULTI_ARCHS = ((64, 5), (64, 64, 5), (128, 64, 5))


class PoolError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class PoolConfig:
    size: int = 100
    way: int = 5
    samples_per_class: int = 50
    epochs: int = 60
    lr: float = 0.01
    batch_size: int = 25
    archs: tuple = DEFAULT_ARCHS


@dataclasses.dataclass
class ModelInfo:
    index: int
    domain: int
    arch: str
    class_ids: tuple
    train_acc: float


@dataclasses.dataclass
class ModelPool:
    models: list
    info: list

    def __len__(self):
        return len(self.models)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = ["index\tdomain\tarchitecture\tclass_ids\ttrain_acc"]
        for m, inf in zip(self.models, self.info):
            nets.save_checkpoint(m, directory / f"{inf.index}.net")
            rows.append(f"{inf.index}\t{inf.domain}\t{inf.arch}\t"
                        f"{','.join(map(str, inf.class_ids))}\t{inf.train_acc!r}")
        (directory / "manifest.tsv").write_text("\n".join(rows) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        lines = (directory / "manifest.tsv").read_text().splitlines()[1:]
        models, info = [], []
        for line in lines:
            idx, dom, arch, cids, acc = line.split("\t")
            m = nets.load_checkpoint(directory / f"{idx}.net")
            inf = ModelInfo(int(idx), int(dom), arch, tuple(int(c) for c in cids.split(",")), float(acc))
            if m.class_labels != inf.class_ids:
                raise PoolError(f"model {idx}: checkpoint labels disagree with manifest")
            models.append(m)
            info.append(inf)
        return cls(models, info)


def ce_loss_and_grad(spec, params, x, y):
    g = ad.Graph()
    layers = nets.bind(spec, params, g)
    loss = ad.cross_entropy(nets.apply_layers(spec, layers, g.constant(x)), y)
    grads = g.backward(loss)
    return loss.item(), nets.flat_grad(grads, layers)


def train_classifier(spec, x, y, epochs, lr, batch_size, seed, class_labels=()):
    """Plain mini-batch SGD on cross-entropy; returns (state, train accuracy)."""
    state = nets.init_network(spec, seed, class_labels)
    rng = np.random.default_rng([seed, 1])
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grad = ce_loss_and_grad(spec, state.params, x[idx], y[idx])
            state.params -= lr * grad
    acc = float((nets.predict(state, x) == y).mean())
    return state, acc


def _assign_archs(archs, size, rng):
    if len(archs) == 1:
        return [archs[0]] * size
    # balanced over the set, random order
    tags = [archs[i % len(archs)] for i in range(size)]
    return [tags[i] for i in rng.permutation(size)]


def pretrain_pool(universe, config=None, seed=0):
    config = config or PoolConfig()
    rng = np.random.default_rng([seed, 0x9001])
    d = universe.config.data_dim
    domains = universe.domains()
    archs = _assign_archs(config.archs, config.size, rng)
    models, info = [], []
    for i in range(config.size):
        dom = domains[i % len(domains)]
        train_ids = universe.class_ids("train", dom)
        if len(train_ids) < config.way:
            raise PoolError(f"domain {dom} has only {len(train_ids)} meta-train classes")
        cids = tuple(int(c) for c in rng.choice(train_ids, size=config.way, replace=False))
        if any(universe.split[c] != "train" for c in cids):
            raise PoolError("pool model assigned a non-train class")
        data_seeds = rng.integers(0, 2**63, size=config.way)
        x = np.concatenate([universe.sample(c, config.samples_per_class, int(s))
                            for c, s in zip(cids, data_seeds)])
        y = np.repeat(np.arange(config.way), config.samples_per_class)
        hidden = archs[i]
        spec = nets.classifier_spec((d, *hidden[:-1], config.way))
        model_seed = int(rng.integers(0, 2**63))
        state, acc = train_classifier(spec, x, y, config.epochs, config.lr, config.batch_size,
                                      model_seed, cids)
        models.append(state)
        info.append(ModelInfo(i, dom, spec.tag, cids, acc))
    return ModelPool(models, info)


def sample_model_batch(pool, b, seed):
    if b > len(pool):
        raise PoolError(f"batch of {b} requested from a pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(len(pool), size=b, replace=False)]
