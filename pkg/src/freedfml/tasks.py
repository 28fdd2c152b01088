"""Synthetic class universe and N-way K-shot episode sampling.

Each class is a template vector plus structured noise.  Noise passes
through a per-class linear map ``J_c = I + gain * P_d R_c`` where ``P_d`` is
an orthonormal basis shared by every class of domain ``d``; the shared
nuisance subspace is what a meta-learned feature extractor can learn to
discount.  Samples are clipped to ``[-1, 1]`` (the generator's range).

Three template families give the domains distinct statistics:

* domain 0: sparse spikes
* domain 1: low-frequency sinusoids
* domain 2: blockwise-constant vectors
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


class UniverseError(ValueError):
    pass


class DataAccessError(RuntimeError):
    """Raised when a trapped split is read."""


@dataclasses.dataclass(frozen=True)
class UniverseConfig:
    data_dim: int = 64
    n_train: int = 20
    n_val: int = 8
    n_test: int = 12
    n_domains: int = 1
    noise_scale: float = 0.15
    nuisance_rank: int = 16
    nuisance_gain: float = 8.0
    max_cosine: float = 0.8


@dataclasses.dataclass
class ClassDef:
    class_id: int
    domain_id: int
    template: np.ndarray
    noise_scale: float
    jitter: np.ndarray


@dataclasses.dataclass
class Episode:
    way: int
    shot: int
    query: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_ids: tuple


def _spike_template(rng, d):
    t = np.zeros(d)
    idx = rng.choice(d, size=max(2, d // 8), replace=False)
    t[idx] = rng.choice([-1.0, 1.0], size=idx.size) * rng.uniform(0.4, 0.8, size=idx.size)
    return t


def _sinusoid_template(rng, d):
    grid = np.arange(d) / d
    t = np.zeros(d)
    for _ in range(3):
        freq = rng.integers(1, 5)
        t += rng.uniform(0.15, 0.3) * np.sin(2 * np.pi * freq * grid + rng.uniform(0, 2 * np.pi))
    return t


def _block_template(rng, d):
    n_blocks = 8
    return np.repeat(rng.uniform(-0.6, 0.6, size=n_blocks), int(np.ceil(d / n_blocks)))[:d]


_FAMILIES = (_spike_template, _sinusoid_template, _block_template)


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(a @ b / (na * nb))


class SplitUniverse:
    def __init__(self, config, seed, classes, split):
        self.config = config
        self.seed = seed
        self.classes = {c.class_id: c for c in classes}
        self.split = dict(split)
        self._trapped = set()

    def class_ids(self, split, domain=None):
        return sorted(cid for cid, s in self.split.items()
                      if s == split and (domain is None or self.classes[cid].domain_id == domain))

    def domains(self):
        return sorted({c.domain_id for c in self.classes.values()})

    def trap(self, *splits):
        """Make any sample drawn from ``splits`` raise :class:`DataAccessError`."""
        self._trapped.update(splits)

    def untrap(self):
        self._trapped.clear()

    def sample(self, class_id, count, seed):
        split = self.split[class_id]
        if split in self._trapped:
            raise DataAccessError(f"read of trapped split {split!r} (class {class_id})")
        return sample_class(self.classes[class_id], count, seed)

    def to_manifest(self):
        c = self.config
        lines = [f"universe-format-version = {MANIFEST_VERSION}", f"seed = {self.seed}"]
        lines += [f"{f.name} = {getattr(c, f.name)!r}" for f in dataclasses.fields(c)]
        lines.append("class_id\tdomain\tsplit")
        lines += [f"{cid}\t{self.classes[cid].domain_id}\t{self.split[cid]}" for cid in sorted(self.classes)]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_manifest())


def build_universe(config=None, seed=0):
    config = config or UniverseConfig()
    rng = np.random.default_rng([seed, 0x5EED])
    d = config.data_dim
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    per_domain = sum(counts.values())
    classes, split = [], {}
    for dom in range(config.n_domains):
        family = _FAMILIES[dom % len(_FAMILIES)]
        basis, _ = np.linalg.qr(rng.standard_normal((d, config.nuisance_rank)))
        templates = []
        for _ in range(per_domain):
            for _attempt in range(1000):
                t = family(rng, d)
                if all(_cosine(t, o) < config.max_cosine for o in templates):
                    break
            else:
                raise UniverseError(
                    f"could not place {per_domain} templates with cosine < {config.max_cosine} "
                    f"in domain {dom}; increase data_dim")
            templates.append(t)
        order = rng.permutation(per_domain)
        names = ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]
        for local, t in enumerate(templates):
            cid = dom * per_domain + local
            mix = rng.standard_normal((config.nuisance_rank, d)) / np.sqrt(d)
            jitter = np.eye(d) + config.nuisance_gain * basis @ mix
            classes.append(ClassDef(cid, dom, t, config.noise_scale, jitter))
            split[cid] = names[order[local]]
    return SplitUniverse(config, seed, classes, split)


def load_universe(path):
    """Rebuild a universe from its manifest; templates are regenerated from the seed."""
    lines = Path(path).read_text().splitlines()
    meta = {}
    rows = []
    table = False
    for line in lines:
        if line.startswith("class_id\t"):
            table = True
            continue
        if table:
            cid, dom, sp = line.split("\t")
            rows.append((int(cid), int(dom), sp))
        else:
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    if int(meta.pop("universe-format-version")) != MANIFEST_VERSION:
        raise UniverseError("unsupported universe manifest version")
    seed = int(meta.pop("seed"))
    kwargs = {f.name: type(f.default)(meta[f.name]) for f in dataclasses.fields(UniverseConfig)}
    uni = build_universe(UniverseConfig(**kwargs), seed)
    for cid, dom, sp in rows:
        if uni.split.get(cid) != sp or uni.classes[cid].domain_id != dom:
            raise UniverseError(f"manifest row for class {cid} disagrees with regenerated universe")
    return uni


def sample_class(cls, count, seed):
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((count, cls.template.size)) @ cls.jitter.T
    return np.clip(cls.template + cls.noise_scale * noise, -1.0, 1.0)


def sample_episode(universe, split, way, shot, query, seed):
    rng = np.random.default_rng(seed)
    domains = [d for d in universe.domains() if len(universe.class_ids(split, d)) >= way]
    if not domains:
        raise UniverseError(f"split {split!r} has fewer than {way} classes in every domain")
    dom = domains[rng.integers(len(domains))] if len(domains) > 1 else domains[0]
    pool = universe.class_ids(split, dom)
    chosen = rng.choice(pool, size=way, replace=False)
    seeds = rng.integers(0, 2**63, size=way)
    sx, qx = [], []
    for cid, s in zip(chosen, seeds):
        x = universe.sample(int(cid), shot + query, int(s))
        sx.append(x[:shot])
        qx.append(x[shot:])
    return Episode(
        way, shot, query,
        np.concatenate(sx), np.repeat(np.arange(way), shot),
        np.concatenate(qx), np.repeat(np.arange(way), query),
        tuple(int(c) for c in chosen),
    )
