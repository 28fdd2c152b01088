"""Training orchestration, ablation arms and meta-test evaluation.

Arms:

``free``      meta-generator + sequential (Reptile) distillation + replay
``erm``       meta-generator + mean-loss distillation step + replay
``sequence``  sequential generator + sequential distillation + replay
``baseline``  sequential generator + replay only
``random``    no meta-training; a fresh learner per evaluation task

The training loop only ever receives a :class:`~freedfml.pool.ModelPool`;
the universe is touched solely by :func:`meta_test`.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from . import bell, five, nets, pool as pool_mod, replay, tasks
from . import learner as lrn

log = logging.getLogger(__name__)

ARMS = ("free", "erm", "sequence", "baseline", "random")
METRIC_COLUMNS = ("epoch", "arm", "gen_loss", "kd_loss", "replay_loss", "mean_inner_product",
                  "bank_size", "inversion_backward_passes_cum", "replay_skipped")
ALIGNMENT_COLUMNS = ("epoch", "arm", "mean_inner_product", "min_pair", "max_pair")


class ConfigError(ValueError):
    pass


class NumericAbort(RuntimeError):
    """Training produced non-finite parameters."""


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _archs(text):
    return tuple(_ints(part) for part in str(text).split(";") if part.strip())


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    arm: str = "free"
    # universe
    universe_seed: int = 0
    data_dim: int = 64
    n_train: int = 20
    n_val: int = 8
    n_test: int = 12
    n_domains: int = 1
    noise_scale: float = 0.15
    nuisance_rank: int = 16
    nuisance_gain: float = 8.0
    # pool
    pool_seed: int = 0
    pool_size: int = 100
    way: int = 5
    pool_samples_per_class: int = 50
    pool_epochs: int = 60
    pool_lr: float = 0.01
    pool_batch: int = 25
    pool_archs: str = "64,64,5"
    # networks
    latent_dim: int = 16
    gen_hidden: str = "64,64"
    learner_hidden: str = "128,64"
    head: str = "prototype"
    head_temperature: float = 1.0
    # meta-training
    epochs: int = 300
    b: int = 4
    k: int = 5
    gamma: float = 0.001
    alpha: float = 0.001
    eps: float = 0.001
    gen_lr: float = 0.01
    z_lr: float = 0.1
    per_class: int = 10
    bank_capacity: int = 200
    replay_episodes: int = 4
    replay_shot: int = 5
    replay_query: int = 5
    replay_inner_steps: int = 5
    replay_inner_lr: float = 0.01
    replay_outer_lr: float = 0.001
    scratch_iterations: int = 200
    record_alignment: bool = True
    # evaluation
    eval_way: int = 5
    eval_shots: str = "1,5"
    eval_query: int = 15
    eval_tasks: int = 600
    eval_steps: int = 20
    eval_lr: float = 0.01
    eval_head: str = "prototype"

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; expected one of {ARMS}")
        for name in ("gamma", "alpha", "eps", "gen_lr", "z_lr", "replay_inner_lr",
                     "replay_outer_lr", "eval_lr", "pool_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.head not in ("prototype", "zero", "shared") or self.eval_head not in ("prototype", "zero"):
            raise ConfigError("head must be prototype|zero|shared, eval_head prototype|zero")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @property
    def universe_config(self):
        return tasks.UniverseConfig(self.data_dim, self.n_train, self.n_val, self.n_test, self.n_domains,
                                    self.noise_scale, self.nuisance_rank, self.nuisance_gain)

    @property
    def pool_config(self):
        return pool_mod.PoolConfig(self.pool_size, self.way, self.pool_samples_per_class,
                                   self.pool_epochs, self.pool_lr, self.pool_batch, _archs(self.pool_archs))

    @property
    def learner_spec(self):
        return nets.classifier_spec((self.data_dim, *_ints(self.learner_hidden), self.way))

    @property
    def generator_spec(self):
        return nets.generator_spec(self.latent_dim, _ints(self.gen_hidden), self.data_dim)

    @property
    def train_head(self):
        return None if self.head == "shared" else self.head


# Rates at which the synthetic benchmark actually learns within 300 epochs.
# The RunConfig defaults keep the small published rates, under which the
# learner barely moves at this scale.
DESK_RATES = {
    "gamma": 1.0,
    "alpha": 0.1,
    "eps": 1.0,
    "gen_lr": 0.2,
    "z_lr": 1.0,
    "per_class": 20,
    "replay_outer_lr": 0.05,
}


def desk_config(**overrides):
    return RunConfig(**{**DESK_RATES, **overrides})


def _coerce(field, raw):
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{field.name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    typ = type(field.default)
    try:
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"{field.name}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text, base=None):
    """Flat ``key = value`` text; ``#`` starts a comment; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(fields[key], raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path, base=None):
    return parse_config(Path(path).read_text(), base)


def dump_config(config):
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in dataclasses.fields(config))


# ------------------------------------------------------------------ state


@dataclasses.dataclass
class TrainState:
    learner: nets.NetworkState
    generator: nets.NetworkState
    bank: replay.MemoryBank
    epoch: int = 0
    inversion_backward_passes: int = 0
    inversion_backward_flops: int = 0
    kd_grad_evals: int = 0
    metrics: list = dataclasses.field(default_factory=list)
    alignment: list = dataclasses.field(default_factory=list)
    batches: list = dataclasses.field(default_factory=list)


def init_state(config):
    s = config.seed
    return TrainState(
        learner=nets.init_network(config.learner_spec, [s, 11]),
        generator=nets.init_network(config.generator_spec, [s, 12]),
        bank=replay.MemoryBank(config.bank_capacity),
    )


def _inversion_learner(learner, y, config, x0):
    if config.train_head is None:
        return learner
    return lrn.with_head(learner, lrn.make_head(config.train_head, learner, x0, y, config.head_temperature))


def recover_batch(state, models, config, epoch, meta):
    """Adapt the generator to every model; returns (tasks, traces, new sequential generator)."""
    recovered, traces = [], []
    gen = state.generator
    for slot, idx in enumerate(models):
        model = meta.models[idx]
        rng = np.random.default_rng([config.seed, epoch, slot, 1])
        y = five.balanced_labels(model.spec.output_dim, config.per_class)
        z = rng.standard_normal((len(y), config.latent_dim))
        x0 = nets.forward_generator(gen, z)
        f = _inversion_learner(state.learner, y, config, x0)
        task, trace = five.adapt_generator(gen, model, f, config.k, [config.seed, epoch, slot, 2],
                                           lr_gen=config.gen_lr, lr_z=config.z_lr,
                                           per_class=config.per_class, z=z, source=idx)
        recovered.append(task)
        traces.append(trace)
        if config.arm in ("sequence", "baseline"):
            gen = nets.NetworkState(gen.spec, trace.gen_params)
    return recovered, traces, gen


def run_free_epoch(state, meta, config):
    """One epoch of the configured arm; ``meta`` is the model pool."""
    epoch = state.epoch
    arm = config.arm
    models = pool_mod.sample_model_batch(meta, config.b, [config.seed, epoch, 0])
    state.batches.append(tuple(models))
    recovered, traces, seq_gen = recover_batch(state, models, config, epoch, meta)
    for task, trace in zip(recovered, traces):
        state.inversion_backward_passes += trace.backward_passes
        state.inversion_backward_flops += trace.backward_flops
        info = meta.info[task.source]
        replay.bank_insert(state.bank, task, info.class_ids, info.domain, task.source)

    if arm in ("free", "erm"):
        state.generator = five.meta_generator_outer_step(state.generator, traces, config.gamma)
    else:
        state.generator = seq_gen

    kd_losses = []
    rec = None
    batch = [(meta.models[t.source], t.x_hat) for t in recovered]
    if arm in ("free", "sequence"):
        state.learner, rec = bell.bell_sequence_step(
            state.learner, batch, config.alpha, config.eps, [config.seed, epoch, 3],
            head=config.train_head, temperature=config.head_temperature, epoch=epoch,
            record=config.record_alignment, losses=kd_losses)
        state.kd_grad_evals += len(batch)
    elif arm == "erm":
        state.learner, rec = bell.erm_step(state.learner, batch, config.alpha, head=config.train_head,
                                           temperature=config.head_temperature, epoch=epoch,
                                           losses=kd_losses)
        state.kd_grad_evals += len(batch)
    if rec is not None:
        state.alignment.append((arm, rec))

    replay_losses = []
    skipped = False
    for e in range(config.replay_episodes):
        try:
            ep = replay.sample_replay_episode(state.bank, config.way, config.replay_shot,
                                              config.replay_query, [config.seed, epoch, 4, e])
        except replay.BankWarmupError as exc:
            log.info("epoch %d: replay skipped (%s)", epoch, exc)
            skipped = True
            break
        state.learner, loss = replay.replay_update(
            state.learner, ep, config.replay_inner_steps, config.replay_inner_lr,
            config.replay_outer_lr, head=config.train_head, temperature=config.head_temperature)
        replay_losses.append(loss)

    for name, net in (("learner", state.learner), ("generator", state.generator)):
        if not np.all(np.isfinite(net.params)):
            raise NumericAbort(f"epoch {epoch}: non-finite {name} parameters")

    state.metrics.append({
        "epoch": epoch,
        "arm": arm,
        "gen_loss": float(np.mean([t.losses[-1] for t in traces])),
        "kd_loss": float(np.mean(kd_losses)) if kd_losses else float("nan"),
        "replay_loss": float(np.mean(replay_losses)) if replay_losses else float("nan"),
        "mean_inner_product": rec.mean if rec is not None else float("nan"),
        "bank_size": len(state.bank),
        "inversion_backward_passes_cum": state.inversion_backward_passes,
        "replay_skipped": int(skipped),
    })
    state.epoch += 1
    return state


def train(meta, config, epochs=None, callback=None):
    state = init_state(config)
    if config.arm == "random":
        return state
    for _ in range(config.epochs if epochs is None else epochs):
        run_free_epoch(state, meta, config)
        if callback is not None:
            callback(state)
    return state


# --------------------------------------------------------------- evaluation


@dataclasses.dataclass
class EvalReport:
    arm: str
    seed: int
    way: int
    shot: int
    accuracies: np.ndarray

    @property
    def tasks(self):
        return len(self.accuracies)

    @property
    def mean(self):
        return float(np.mean(self.accuracies))

    @property
    def ci95(self):
        return confidence_halfwidth(self.accuracies)


def confidence_halfwidth(accs):
    accs = np.asarray(accs, dtype=np.float64)
    return float(1.96 * accs.std(ddof=1) / np.sqrt(len(accs))) if len(accs) > 1 else float("nan")


def adapt_and_score(learner, episode, steps, lr, head, temperature=1.0):
    state = learner.clone()
    state = lrn.with_head(state, lrn.make_head(head, state, episode.support_x, episode.support_y, temperature))
    for _ in range(steps):
        _, g = replay.ce_grad(state, episode.support_x, episode.support_y)
        state.params -= lr * g
    return float((nets.predict(state, episode.query_x) == episode.query_y).mean())


def meta_test(learner, universe, config, shot, *, tasks_count=None, steps=None, head=None,
              split="test", fresh_learner=False):
    """Mean query accuracy over sampled episodes of the held-out split."""
    n = config.eval_tasks if tasks_count is None else tasks_count
    steps = config.eval_steps if steps is None else steps
    head = config.eval_head if head is None else head
    accs = np.empty(n)
    for t in range(n):
        ep = tasks.sample_episode(universe, split, config.eval_way, shot, config.eval_query,
                                  [config.seed, 7, shot, t])
        f = nets.init_network(config.learner_spec, [config.seed, 8, t]) if fresh_learner else learner
        accs[t] = adapt_and_score(f, ep, steps, config.eval_lr, head, config.head_temperature)
    return EvalReport(config.arm, config.seed, config.eval_way, shot, accs)


@dataclasses.dataclass
class ArmResult:
    config: RunConfig
    state: TrainState
    reports: dict


def build_universe(config):
    return tasks.build_universe(config.universe_config, config.universe_seed)


def build_pool(universe, config):
    return pool_mod.pretrain_pool(universe, config.pool_config, config.pool_seed)


def run_arm(config, meta, universe, shots=None, eval_tasks=None):
    """Train the configured arm on ``meta`` and meta-test it on ``universe``."""
    if config.arm not in ARMS:
        raise ConfigError(f"unknown arm {config.arm!r}")
    state = train(meta, config)
    shots = _ints(config.eval_shots) if shots is None else shots
    reports = {k: meta_test(state.learner, universe, config, k, tasks_count=eval_tasks,
                            fresh_learner=config.arm == "random") for k in shots}
    return ArmResult(config, state, reports)


# ------------------------------------------------------------------ output


def write_metrics(rows, path):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_COLUMNS})


def read_metrics(path):
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def write_alignment(records, path):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(ALIGNMENT_COLUMNS)
        for arm, rec in records:
            w.writerow([rec.epoch, arm, rec.mean, rec.min_pair, rec.max_pair])


def write_eval(reports, path):
    path = Path(path)
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write("arm\tseed\tN\tK\ttasks\tmean_acc\tci95\n")
        for r in reports:
            fh.write(f"{r.arm}\t{r.seed}\t{r.way}\t{r.shot}\t{r.tasks}\t{r.mean:.6f}\t{r.ci95:.6f}\n")


def write_features(state, meta, config, path, n_models=10):
    """Learner trunk features of tasks recovered from the first ``n_models`` pool models.

    Rows are ``model_index, sample_index, label, features`` (comma separated
    floats), ready for an external t-SNE.
    """
    with Path(path).open("w") as fh:
        fh.write("model_index\tsample_index\tlabel\tfeatures\n")
        for idx in range(min(n_models, len(meta))):
            model = meta.models[idx]
            y = five.balanced_labels(model.spec.output_dim, config.per_class)
            x0 = nets.forward_generator(state.generator, np.random.default_rng([config.seed, 9, idx])
                                        .standard_normal((len(y), config.latent_dim)))
            f = _inversion_learner(state.learner, y, config, x0)
            task, _ = five.adapt_generator(state.generator, model, f, config.k, [config.seed, 9, idx],
                                           lr_gen=config.gen_lr, lr_z=config.z_lr,
                                           per_class=config.per_class, source=idx)
            h = nets.features(state.learner, task.x_hat)
            for j, row in enumerate(h):
                fh.write(f"{idx}\t{j}\t{model.class_labels[task.y[j]]}\t"
                         f"{','.join(f'{v:.6g}' for v in row)}\n")


def loss_plateaued(values, window=20, rel_tol=0.05):
    """True when the last window's mean is within ``rel_tol`` of the previous window's."""
    v = np.asarray([x for x in values if np.isfinite(x)])
    if len(v) < 2 * window:
        return False
    a, b = v[-2 * window:-window].mean(), v[-window:].mean()
    return abs(b - a) <= rel_tol * max(abs(a), 1e-12)
