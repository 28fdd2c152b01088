"""MLP classifier and generator families, parameter layout and checkpoints.

Parameters live in one flat float64 vector.  Layer ``i`` occupies a weight
block ``[w_i x w_{i+1}]`` (row-major) followed by a bias block
``[w_{i+1}]``.  Hidden layers use ReLU; the classifier head is linear and
the generator head is ``tanh``.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .kernels import fnv1a64

FORMAT_VERSION = 1
MAGIC = "freedfml-net"
_END = "end-manifest"


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    kind: str
    widths: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind not in ("classifier", "generator"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must hold >= 2 positive integers, got {self.widths}")

    @property
    def input_dim(self):
        return self.widths[0]

    @property
    def output_dim(self):
        return self.widths[-1]

    @property
    def activation(self):
        return "linear" if self.kind == "classifier" else "tanh"

    @property
    def tag(self):
        return "x".join(str(w) for w in self.widths)

    def layer_shapes(self):
        return [(a, b) for a, b in zip(self.widths[:-1], self.widths[1:])]

    def param_count(self):
        return sum(a * b + b for a, b in self.layer_shapes())

    def head_offset(self):
        """Start index of the final layer's weight block."""
        return sum(a * b + b for a, b in self.layer_shapes()[:-1])


def classifier_spec(widths):
    return NetworkSpec("classifier", widths)


def generator_spec(latent_dim=16, hidden=(64, 64), data_dim=64):
    return NetworkSpec("generator", (latent_dim, *hidden, data_dim))


@dataclasses.dataclass
class NetworkState:
    spec: NetworkSpec
    params: np.ndarray
    class_labels: tuple = ()

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        self.class_labels = tuple(int(c) for c in self.class_labels)
        if self.params.shape != (self.spec.param_count(),):
            raise ValueError(f"expected {self.spec.param_count()} params, got {self.params.shape}")
        if self.spec.kind == "classifier" and self.class_labels:
            if len(set(self.class_labels)) != self.spec.output_dim or len(self.class_labels) != self.spec.output_dim:
                raise ValueError("class_labels must hold output_dim distinct ids")
        if self.spec.kind == "generator" and self.class_labels:
            raise ValueError("generators carry no class labels")

    def clone(self):
        return NetworkState(self.spec, self.params.copy(), self.class_labels)

    def layers(self, params=None):
        """Weight/bias views into ``params`` (defaults to own params)."""
        p = self.params if params is None else params
        return split_layers(self.spec, p)


@dataclasses.dataclass
class LatentCode:
    values: np.ndarray
    trainable: bool = True

    @classmethod
    def sample(cls, batch, latent_dim, rng):
        return cls(rng.standard_normal((batch, latent_dim)))


def split_layers(spec, params):
    out = []
    off = 0
    for a, b in spec.layer_shapes():
        w = params[off:off + a * b].reshape(a, b)
        off += a * b
        out.append((w, params[off:off + b]))
        off += b
    return out


def init_network(spec, seed, class_labels=()):
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.param_count())
    for w, _ in split_layers(spec, params):
        fan_in, fan_out = w.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return NetworkState(spec, params, class_labels)


# ------------------------------------------------------------- forward


def bind(spec, params, graph, requires_grad=True):
    """Register each layer block as a graph leaf; returns [(W, b), ...]."""
    return [(graph.leaf(w, requires_grad), graph.leaf(b, requires_grad))
            for w, b in split_layers(spec, params)]


def flat_grad(grads, layers):
    return np.concatenate([np.concatenate([grads[w].ravel(), grads[b]]) for w, b in layers])


def apply_layers(spec, layers, x, upto=None):
    """Run ``x`` through ``layers[:upto]``; the final layer gets the head activation."""
    n = len(layers)
    upto = n if upto is None else upto
    h = x
    for i, (w, b) in enumerate(layers[:upto]):
        h = ad.matmul(h, w) + b
        if i < n - 1:
            h = ad.relu(h)
        elif spec.kind == "generator":
            h = ad.tanh(h)
    return h


def _check_input(spec, x):
    arr = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    if arr.ndim != 2 or arr.shape[1] != spec.input_dim:
        raise ad.ShapeError("forward", arr.shape, (None, spec.input_dim))


def forward_classifier(state, x):
    """Logits as a plain array (no gradient tape)."""
    _check_input(state.spec, x)
    h = np.asarray(x.data if isinstance(x, ad.Tensor) else x, dtype=np.float64)
    layers = state.layers()
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def forward_generator(state, z):
    values = z.values if isinstance(z, LatentCode) else z
    _check_input(state.spec, values)
    h = np.asarray(values, dtype=np.float64)
    layers = state.layers()
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        h = np.maximum(h, 0.0) if i < len(layers) - 1 else np.tanh(h)
    return h


def features(state, x):
    """Penultimate (trunk) activations of a classifier."""
    _check_input(state.spec, x)
    h = np.asarray(x, dtype=np.float64)
    for w, b in state.layers()[:-1]:
        h = np.maximum(h @ w + b, 0.0)
    return h


def predict(state, x):
    return forward_classifier(state, x).argmax(axis=1)


# --------------------------------------------------------- checkpoints


def _payload(params):
    return np.ascontiguousarray(params, dtype="<f8").tobytes()


def checkpoint_bytes(state):
    payload = _payload(state.params)
    spec = state.spec
    lines = [
        MAGIC,
        f"format-version = {FORMAT_VERSION}",
        f"kind = {spec.kind}",
        f"widths = {','.join(map(str, spec.widths))}",
        f"input-dim = {spec.input_dim}",
        f"output-dim = {spec.output_dim}",
        f"class-labels = {','.join(map(str, state.class_labels))}",
        f"param-count = {spec.param_count()}",
        f"checksum = {fnv1a64(payload):016x}",
        _END,
    ]
    return ("\n".join(lines) + "\n").encode("ascii") + payload


def save_checkpoint(state, path):
    Path(path).write_bytes(checkpoint_bytes(state))


def parse_checkpoint(blob):
    marker = ("\n" + _END + "\n").encode("ascii")
    cut = blob.find(marker)
    if cut < 0:
        raise TruncationError("manifest terminator not found")
    head = blob[:cut].decode("ascii", errors="replace").split("\n")
    payload = blob[cut + len(marker):]
    if not head or head[0] != MAGIC:
        raise CheckpointError("not a freedfml network checkpoint")
    meta = {}
    for line in head[1:]:
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    try:
        version = int(meta["format-version"])
    except (KeyError, ValueError):
        raise VersionError("missing format-version") from None
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format-version {version} (expected {FORMAT_VERSION})")
    try:
        widths = tuple(int(w) for w in meta["widths"].split(","))
        spec = NetworkSpec(meta["kind"], widths)
        count = int(meta["param-count"])
        dims = int(meta["input-dim"]), int(meta["output-dim"])
        checksum = int(meta["checksum"], 16)
        labels = tuple(int(c) for c in meta["class-labels"].split(",") if c)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from None
    if count != spec.param_count() or dims != (spec.input_dim, spec.output_dim):
        raise CheckpointError("manifest fields disagree with widths")
    if len(payload) != 8 * count:
        raise TruncationError(f"payload holds {len(payload)} bytes, manifest declares {count} params")
    if fnv1a64(payload) != checksum:
        raise ChecksumError("payload checksum mismatch")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return NetworkState(spec, params, labels)


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())


