"""Dense batch-norm autoencoder with hand-rolled backprop and Adam.

Topology for ``dims = (640, 128, 128, 128, 8, 128, 128, 128, 640)``: every
layer but the last is Linear -> BatchNorm -> ReLU (the 8-wide bottleneck
included); the output layer is a bare Linear. All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Normalizer
from .errors import (
    CorruptFile,
    InsufficientData,
    NonFiniteActivation,
    ShapeMismatch,
    VersionMismatch,
)
from .io import atomic_write_bytes

log = logging.getLogger(__name__)

DEFAULT_DIMS = (640, 128, 128, 128, 8, 128, 128, 128, 640)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------- PRNG

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


class SplitMix64:
    """Vigna's SplitMix64, vectorized over a block of consecutive draws.

    State advances by the golden-ratio increment per draw, so drawing n
    values at once equals n single draws.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK
        return z

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")


def derive_seed(seed: int, stream: str) -> int:
    """Independent substream seed, e.g. ``derive_seed(13711, "shuffle")``."""
    tag = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:8], "little")
    return int(SplitMix64(int(seed) ^ tag).next_u64(1)[0])


# ---------------------------------------------------------------- config/state

@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    has_bn: bool
    activation: str  # "relu" | "none"


def layer_specs(dims) -> list[LayerSpec]:
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"invalid layer dims {dims}")
    n = len(dims) - 1
    return [LayerSpec(dims[i], dims[i + 1], i < n - 1, "relu" if i < n - 1 else "none")
            for i in range(n)]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 13711
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class AutoencoderState:
    dims: tuple[int, ...]
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    normalizer: Normalizer | None = None
    covariances: object | None = None  # scoring.DomainCovariances
    thresholds: dict = field(default_factory=dict)  # backend -> scoring.Threshold

    @property
    def layers(self) -> list[LayerSpec]:
        return layer_specs(self.dims)

    def param_names(self) -> list[str]:
        names = []
        for i, spec in enumerate(self.layers):
            names += [f"W{i}", f"b{i}"]
            if spec.has_bn:
                names += [f"gamma{i}", f"beta{i}"]
        return names


def init(seed: int, dims=DEFAULT_DIMS) -> AutoencoderState:
    """Glorot-uniform weights from SplitMix64(derive_seed(seed, "init")), zero biases."""
    dims = tuple(int(d) for d in dims)
    rng = SplitMix64(derive_seed(seed, "init"))
    params, buffers = {}, {}
    for i, spec in enumerate(layer_specs(dims)):
        limit = math.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        u = rng.uniform(spec.in_dim * spec.out_dim).reshape(spec.in_dim, spec.out_dim)
        params[f"W{i}"] = (2.0 * u - 1.0) * limit
        params[f"b{i}"] = np.zeros(spec.out_dim)
        if spec.has_bn:
            params[f"gamma{i}"] = np.ones(spec.out_dim)
            params[f"beta{i}"] = np.zeros(spec.out_dim)
            buffers[f"running_mean{i}"] = np.zeros(spec.out_dim)
            buffers[f"running_var{i}"] = np.ones(spec.out_dim)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return AutoencoderState(dims, params, buffers, zeros,
                            {k: np.zeros_like(v) for k, v in params.items()},
                            step=0, seed=int(seed))


# ---------------------------------------------------------------- forward/backward

def forward(state: AutoencoderState, batch, mode: str = "eval", update_stats: bool = True):
    """Return ``(reconstruction, cache)``; cache is None in eval mode.

    Train mode normalizes with batch statistics (population variance) and,
    unless ``update_stats`` is False, folds them into the running buffers.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.dims[0]:
        raise ShapeMismatch(f"batch shape {x.shape}, model expects (*, {state.dims[0]})")
    train = mode == "train"
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if train and x.shape[0] < 2:
        raise InsufficientData("train-mode forward needs a batch of at least 2 rows")
    p, buf = state.params, state.buffers
    cache = [] if train else None
    a = x
    for i, spec in enumerate(state.layers):
        z = a @ p[f"W{i}"] + p[f"b{i}"]
        entry = {"a": a}
        if spec.has_bn:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    rm, rv = buf[f"running_mean{i}"], buf[f"running_var{i}"]
                    rm *= 1.0 - BN_MOMENTUM
                    rm += BN_MOMENTUM * mu
                    rv *= 1.0 - BN_MOMENTUM
                    rv += BN_MOMENTUM * var
            else:
                mu, var = buf[f"running_mean{i}"], buf[f"running_var{i}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            y = p[f"gamma{i}"] * xhat + p[f"beta{i}"]
            a = np.maximum(y, 0.0)
            entry.update(xhat=xhat, inv_std=inv_std, mask=y > 0)
        else:
            a = z
        if train:
            cache.append(entry)
    if not np.all(np.isfinite(a)):
        raise NonFiniteActivation(
            f"non-finite reconstruction (step {state.step}); "
            f"max |input| = {np.nanmax(np.abs(x)):.3g}")
    return a, cache


def backward(state: AutoencoderState, cache, grad_out) -> dict[str, np.ndarray]:
    grads = {}
    g = grad_out
    p = state.params
    for i in reversed(range(len(cache))):
        spec = state.layers[i]
        entry = cache[i]
        if spec.has_bn:
            dy = g * entry["mask"]
            xhat = entry["xhat"]
            grads[f"gamma{i}"] = np.sum(dy * xhat, axis=0)
            grads[f"beta{i}"] = dy.sum(axis=0)
            dxhat = dy * p[f"gamma{i}"]
            n = dxhat.shape[0]
            dz = (entry["inv_std"] / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dz = g
        grads[f"W{i}"] = entry["a"].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        if i > 0:
            g = dz @ p[f"W{i}"].T
    return grads


def mse(x, x_hat) -> float:
    return float(np.mean(np.square(np.asarray(x) - np.asarray(x_hat))))


def loss_and_gradients(state: AutoencoderState, batch, update_stats: bool = True):
    """Train-mode MSE between batch and its reconstruction, with gradients."""
    x = np.asarray(batch, dtype=np.float64)
    x_hat, cache = forward(state, x, "train", update_stats=update_stats)
    resid = x_hat - x
    loss = float(np.mean(resid * resid))
    if not math.isfinite(loss):
        raise NonFiniteActivation(f"non-finite loss at step {state.step}")
    grads = backward(state, cache, (2.0 / resid.size) * resid)
    return loss, grads


def adam_step(state: AutoencoderState, grads, cfg: TrainConfig = TrainConfig()):
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        m, v = state.adam_m[name], state.adam_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        state.params[name] -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


def train(features, cfg: TrainConfig = TrainConfig(), state: AutoencoderState | None = None,
          dims=None):
    """Fit on (already standardized) rows; returns ``(state, per-epoch mean loss)``.

    A trailing batch of a single row is skipped because batch statistics
    need two rows.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientData(f"need at least 2 training rows, got {x.shape[0] if x.ndim else 0}")
    if state is None:
        state = init(cfg.seed, dims or (x.shape[1],) + DEFAULT_DIMS[1:-1] + (x.shape[1],))
    shuffler = SplitMix64(derive_seed(cfg.seed, "shuffle"))
    n = x.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = shuffler.permutation(n) if cfg.shuffle else np.arange(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            try:
                loss, grads = loss_and_gradients(state, x[idx])
            except NonFiniteActivation as exc:
                raise NonFiniteActivation(f"epoch {epoch + 1}, batch at row {start}: {exc}") from exc
            adam_step(state, grads, cfg)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        log.debug("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, history[-1])
    return state, history


def reconstruct(state: AutoencoderState, x) -> np.ndarray:
    return forward(state, x, "eval")[0]


# ---------------------------------------------------------------- persistence

MAGIC = b"FSAEMDL\x00"
VERSION = 1
_DIGEST = 32


def _tensor_table(state: AutoencoderState):
    tensors = []
    for name in state.param_names():
        tensors.append((f"param.{name}", state.params[name]))
    for name in sorted(state.buffers):
        tensors.append((f"buffer.{name}", state.buffers[name]))
    for name in state.param_names():
        tensors.append((f"adam_m.{name}", state.adam_m[name]))
        tensors.append((f"adam_v.{name}", state.adam_v[name]))
    if state.normalizer is not None:
        tensors.append(("norm.mean", state.normalizer.mean))
        tensors.append(("norm.std", state.normalizer.std))
    cov = state.covariances
    if cov is not None:
        for key in ("sigma_s", "sigma_t", "sigma_s_inv", "sigma_t_inv"):
            tensors.append((f"cov.{key}", getattr(cov, key)))
    return tensors


def dumps_model(state: AutoencoderState, version: int = VERSION) -> bytes:
    tensors = _tensor_table(state)
    meta = {
        "step": state.step,
        "seed": state.seed,
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
        "thresholds": {b: {"value": t.value, "rule": t.rule}
                       for b, t in sorted(state.thresholds.items())},
    }
    if state.covariances is not None:
        cov = state.covariances
        meta["covariances"] = {"shrinkage_used": list(cov.shrinkage_used),
                               "frame_counts": list(cov.frame_counts)}
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", version, len(state.dims)),
             struct.pack(f"<{len(state.dims)}I", *state.dims),
             struct.pack("<I", len(meta_bytes)), meta_bytes]
    parts += [np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in tensors]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_model(state: AutoencoderState, path):
    atomic_write_bytes(Path(path), dumps_model(state))


def loads_model(data: bytes, source="<bytes>") -> AutoencoderState:
    from .scoring import DomainCovariances, Threshold

    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise CorruptFile(f"{source}: not a model file")
    version, n_dims = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise VersionMismatch(f"{source}: schema version {version}, this build reads {VERSION}")
    if len(data) < _DIGEST or hashlib.sha256(data[:-_DIGEST]).digest() != data[-_DIGEST:]:
        raise CorruptFile(f"{source}: checksum mismatch (truncated or modified)")
    body = memoryview(data)[:-_DIGEST]
    try:
        off = len(MAGIC) + 8
        dims = struct.unpack_from(f"<{n_dims}I", body, off)
        off += 4 * n_dims
        (meta_len,) = struct.unpack_from("<I", body, off)
        off += 4
        meta = json.loads(bytes(body[off:off + meta_len]))
        off += meta_len
        arrays = {}
        for name, shape in meta["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=off)
            arrays[name] = arr.astype(np.float64).reshape(shape)
            off += 8 * count
        if off != len(body):
            raise CorruptFile(f"{source}: {len(body) - off} trailing bytes")
    except (struct.error, ValueError, KeyError) as exc:
        raise CorruptFile(f"{source}: {exc}") from exc

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    state = AutoencoderState(tuple(dims), group("param."), group("buffer."),
                             group("adam_m."), group("adam_v."),
                             step=meta["step"], seed=meta["seed"])
    if "norm.mean" in arrays:
        state.normalizer = Normalizer(arrays["norm.mean"], arrays["norm.std"])
    if "covariances" in meta:
        c = meta["covariances"]
        state.covariances = DomainCovariances(
            arrays["cov.sigma_s"], arrays["cov.sigma_t"],
            arrays["cov.sigma_s_inv"], arrays["cov.sigma_t_inv"],
            tuple(c["shrinkage_used"]), tuple(c["frame_counts"]))
    state.thresholds = {b: Threshold(t["value"], t["rule"]) for b, t in meta["thresholds"].items()}
    return state


def load_model(path) -> AutoencoderState:
    path = Path(path)
    return loads_model(path.read_bytes(), str(path))
