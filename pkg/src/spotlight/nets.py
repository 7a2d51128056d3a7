"""Miniature F-net style 3D encoder-decoder with hand-written backprop and Adam.

Layer vocabulary: 3x3x3 stride-1 convolutions on zero-padded input, 2x2x2
stride-2 convolutions (downsample) and 2x2x2 stride-2 transposed
convolutions (upsample), each followed by batch norm and ReLU, except the
final 3x3x3 convolution which is linear. Activations are channels-last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from spotlight import _conv
from spotlight.errors import (
    Incompatible,
    InvalidCache,
    NoForegroundPatches,
    NumericFailure,
    ShapeMismatch,
)
from spotlight.foreground import MIN_FG_FRACTION
from spotlight.losses import LossConfig, plain_mse, spotlight_loss

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 8
    depth: int = 1
    batch_norm: bool = True

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 0:
            raise ValueError("base_channels must be >= 1 and depth >= 0")

    @property
    def divisor(self) -> int:
        return 2**self.depth


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # conv3 | down | up
    cin: int
    cout: int
    norm_relu: bool = True

    @property
    def kernel(self) -> int:
        return 3 if self.kind == "conv3" else 2


def layer_plan(cfg: NetConfig) -> list[Layer]:
    c = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
    plan = []
    cin = 1
    for lvl in range(cfg.depth):
        plan.append(Layer(f"enc{lvl}", "conv3", cin, c[lvl]))
        plan.append(Layer(f"down{lvl}", "down", c[lvl], c[lvl + 1]))
        cin = c[lvl + 1]
    plan.append(Layer("bottom", "conv3", cin, c[cfg.depth]))
    for lvl in reversed(range(cfg.depth)):
        plan.append(Layer(f"up{lvl}", "up", c[lvl + 1], c[lvl]))
        plan.append(Layer(f"dec{lvl}", "conv3", 2 * c[lvl], c[lvl]))
    plan.append(Layer("final", "conv3", c[0], 1, norm_relu=False))
    return plan


@dataclass
class NetParams:
    """Trainable tensors (``weights``) plus batch-norm running statistics (``buffers``).

    ``version`` increases on every in-place optimizer update so that caches
    from earlier forward passes can be recognised as stale.
    """

    config: NetConfig
    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    version: int = 0

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def copy(self) -> "NetParams":
        return NetParams(
            self.config,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.version,
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> NetParams:
    """He-uniform weights, zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    weights, buffers = {}, {}
    for layer in layer_plan(cfg):
        k = layer.kernel
        fan_in = layer.cin if layer.kind == "up" else k**3 * layer.cin
        bound = math.sqrt(6.0 / fan_in)
        shape = (k, k, k, layer.cin, layer.cout)
        weights[f"{layer.name}.w"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        weights[f"{layer.name}.b"] = np.zeros(layer.cout, dtype)
        if layer.norm_relu and cfg.batch_norm:
            weights[f"{layer.name}.gamma"] = np.ones(layer.cout, dtype)
            weights[f"{layer.name}.beta"] = np.zeros(layer.cout, dtype)
            buffers[f"{layer.name}.running_mean"] = np.zeros(layer.cout, dtype)
            buffers[f"{layer.name}.running_var"] = np.ones(layer.cout, dtype)
    return NetParams(cfg, weights, buffers)


@dataclass
class Cache:
    params: NetParams
    version: int
    training: bool
    input_shape: tuple
    records: dict = field(default_factory=dict)

    def relu_patterns(self) -> list[np.ndarray]:
        return [r["relu"] for r in self.records.values() if "relu" in r]


_FORWARD = {"conv3": _conv.conv3_forward, "down": _conv.down_forward, "up": _conv.up_forward}
_BACKWARD = {"conv3": _conv.conv3_backward, "down": _conv.down_backward, "up": _conv.up_backward}


def _channel_mean(a: np.ndarray) -> np.ndarray:
    """Per-channel mean over (N, Z, Y, X) as one BLAS matrix-vector product."""
    a2 = a.reshape(-1, a.shape[-1])
    return np.ones(a2.shape[0], a.dtype) @ a2 / a2.shape[0]


def _layer_forward(params, layer, x, training, records):
    w = params.weights
    z = _FORWARD[layer.kind](x, w[f"{layer.name}.w"]) + w[f"{layer.name}.b"]
    rec = {"x": x}
    if layer.norm_relu:
        if params.config.batch_norm:
            if training:
                mean = _channel_mean(z)
                centered = z - mean
                var = _channel_mean(centered * centered)
            else:
                mean = params.buffers[f"{layer.name}.running_mean"]
                var = params.buffers[f"{layer.name}.running_var"]
            invstd = (1.0 / np.sqrt(var + BN_EPS)).astype(z.dtype)
            xhat = (z - mean) * invstd
            z = xhat * w[f"{layer.name}.gamma"] + w[f"{layer.name}.beta"]
            rec.update(xhat=xhat, invstd=invstd, mean=mean, var=var, count=z.size // z.shape[-1])
        relu = z > 0
        z = z * relu
        rec["relu"] = relu
    records[layer.name] = rec
    return z


def forward(params: NetParams, x: np.ndarray, training: bool = True) -> tuple[np.ndarray, Cache]:
    """Run the network on a batch (N, Z, Y, X) -> (N, Z, Y, X).

    ``training=True`` normalizes with batch statistics; otherwise the running
    statistics are used. Running statistics are not touched here; see
    :func:`update_running_stats`.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeMismatch(f"expected a (N, Z, Y, X) batch, got shape {x.shape}")
    div = params.config.divisor
    if any(d % div for d in x.shape[1:]):
        raise ShapeMismatch(f"spatial shape {x.shape[1:]} not divisible by {div}")
    h = np.ascontiguousarray(x[..., None], dtype=params.dtype)
    cache = Cache(params, params.version, training, x.shape)
    skips = []
    plan = layer_plan(params.config)
    for layer in plan:
        if layer.kind == "up":
            h = _layer_forward(params, layer, h, training, cache.records)
            h = np.concatenate([skips.pop(), h], axis=-1)
            continue
        h = _layer_forward(params, layer, h, training, cache.records)
        if layer.name.startswith("enc"):
            skips.append(h)
    return h[..., 0], cache


def backward(cache: Cache, grad_output: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients of sum(grad_output * prediction)."""
    params = cache.params
    if cache.version != params.version:
        raise InvalidCache("parameters changed since this forward pass")
    if not cache.training:
        raise InvalidCache("backward needs a training-mode forward pass")
    grad_output = np.asarray(grad_output)
    if grad_output.shape != cache.input_shape:
        raise ShapeMismatch(f"grad shape {grad_output.shape} != output shape {cache.input_shape}")
    w = params.weights
    grads = {}
    g = np.ascontiguousarray(grad_output[..., None], dtype=params.dtype)
    skip_grads = []
    plan = layer_plan(params.config)
    for layer in reversed(plan):
        if layer.kind == "up":
            c_skip = g.shape[-1] - layer.cout
            skip_grads.append(g[..., :c_skip])
            g = np.ascontiguousarray(g[..., c_skip:])
        elif layer.name.startswith("enc"):
            g = g + skip_grads.pop()
        rec = cache.records[layer.name]
        if layer.norm_relu:
            g = g * rec["relu"]
            if params.config.batch_norm:
                xhat, invstd, count = rec["xhat"], rec["invstd"], rec["count"]
                gamma = w[f"{layer.name}.gamma"]
                sum_g = _channel_mean(g) * count
                sum_gx = _channel_mean(g * xhat) * count
                grads[f"{layer.name}.beta"] = sum_g
                grads[f"{layer.name}.gamma"] = sum_gx
                # d/dz of BN with batch statistics, written per channel
                g = (gamma * invstd) * (g - sum_g / count - xhat * (sum_gx / count))
        grads[f"{layer.name}.b"] = _channel_mean(g) * (g.size // g.shape[-1])
        need_dx = layer is not plan[0]
        dx, dw = _BACKWARD[layer.kind](rec["x"], w[f"{layer.name}.w"], g, need_dx)
        grads[f"{layer.name}.w"] = dw.astype(g.dtype, copy=False)
        g = dx
    return {k: grads[k] for k in w}


def update_running_stats(params: NetParams, cache: Cache, momentum: float = BN_MOMENTUM) -> None:
    if not params.config.batch_norm or not cache.training:
        return
    for name, rec in cache.records.items():
        if "xhat" not in rec:
            continue
        n = rec["count"]
        unbiased = rec["var"] * (n / max(n - 1, 1))
        rm = params.buffers[f"{name}.running_mean"]
        rv = params.buffers[f"{name}.running_var"]
        rm *= 1 - momentum
        rm += momentum * rec["mean"]
        rv *= 1 - momentum
        rv += momentum * unbiased.astype(rv.dtype)


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.weights.items()},
            {k: np.zeros_like(p) for k, p in params.weights.items()},
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    patch_shape: tuple[int, int, int] = (16, 32, 32)
    iterations: int = 2000
    rng_seed: int = 0
    loss: str = "spotlight"  # or "mse"
    loss_cfg: LossConfig = LossConfig()
    max_retries: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("mse", "spotlight"):
            raise ValueError(f"unknown loss {self.loss!r}")
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))


def adam_step(params: NetParams, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, applied in place. Returns (params, state)."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.weights.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)
    params.version += 1
    return params, state


# -- training -----------------------------------------------------------------


def batch_loss(pred: np.ndarray, targets: np.ndarray, masks: Optional[np.ndarray], cfg: TrainConfig):
    """Mean of per-sample losses over the batch, with the matching gradient."""
    n = pred.shape[0]
    value = 0.0
    grad = np.empty_like(pred)
    for i in range(n):
        if cfg.loss == "mse":
            res = plain_mse(pred[i], targets[i])
        else:
            res = spotlight_loss(pred[i], targets[i], masks[i], cfg.loss_cfg)
        value += res.value / n
        grad[i] = res.grad / n
    return value, grad


def sample_batch(rng: np.random.Generator, dataset, cfg: TrainConfig):
    pz, py, px = cfg.patch_shape
    xs, ys, ms = [], [], []
    for _ in range(cfg.batch_size):
        for _attempt in range(cfg.max_retries):
            idx = int(rng.integers(len(dataset)))
            inp, tgt, msk = dataset[idx]
            shape = inp.shape
            if any(p > d for p, d in zip(cfg.patch_shape, shape)):
                raise ShapeMismatch(f"patch {cfg.patch_shape} larger than volume {shape}")
            oz, oy, ox = (int(rng.integers(d - p + 1)) for d, p in zip(shape, cfg.patch_shape))
            sl = (slice(oz, oz + pz), slice(oy, oy + py), slice(ox, ox + px))
            m = msk[sl]
            if cfg.loss == "mse" or np.count_nonzero(m) >= MIN_FG_FRACTION * m.size:
                break
        else:
            raise NoForegroundPatches(
                f"no patch with >= {MIN_FG_FRACTION:.1%} foreground after {cfg.max_retries} draws"
            )
        xs.append(inp[sl])
        ys.append(tgt[sl])
        ms.append(m)
    return np.stack(xs), np.stack(ys), np.stack(ms)


def train(
    train_cfg: TrainConfig,
    net_cfg: NetConfig,
    dataset,
    callback: Optional[Callable[[int, float], None]] = None,
) -> tuple[NetParams, list[float]]:
    """Seeded mini-batch training on random patches.

    ``dataset`` is a sequence of (input, target, mask) arrays of equal shape.
    Returns the final parameters and the per-iteration loss values.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if any(p % net_cfg.divisor for p in train_cfg.patch_shape):
        raise ShapeMismatch(f"patch {train_cfg.patch_shape} not divisible by {net_cfg.divisor}")
    data = [tuple(np.asarray(a) for a in item) for item in dataset]
    for item in data:
        if not (item[0].shape == item[1].shape == item[2].shape):
            raise ShapeMismatch("input, target and mask shapes differ")
    params = init_params(net_cfg, seed=train_cfg.rng_seed)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng([train_cfg.rng_seed, 1])
    trace = []
    for it in range(train_cfg.iterations):
        xb, yb, mb = sample_batch(rng, data, train_cfg)
        pred, cache = forward(params, xb, training=True)
        value, grad = batch_loss(pred, yb.astype(pred.dtype), mb, train_cfg)
        if not math.isfinite(value):
            raise NumericFailure(f"non-finite loss at iteration {it}")
        grads = backward(cache, grad)
        update_running_stats(params, cache)
        adam_step(params, grads, state, train_cfg)
        trace.append(value)
        if callback is not None:
            callback(it, value)
    return params, trace


def predict(params: NetParams, volume: np.ndarray) -> np.ndarray:
    """Inference-mode prediction for a single (Z, Y, X) volume."""
    out, _ = forward(params, np.asarray(volume)[None], training=False)
    return out[0]


# -- checkpoints ----------------------------------------------------------------

_MAGIC = "spotlight-checkpoint v1"


def save_checkpoint(params: NetParams, path, meta: Optional[dict] = None) -> None:
    """Text header (config, tensor shapes, metadata) then raw little-endian f32 payloads."""
    cfg = params.config
    lines = [
        _MAGIC,
        f"net.base_channels={cfg.base_channels}",
        f"net.depth={cfg.depth}",
        f"net.batch_norm={int(cfg.batch_norm)}",
    ]
    for key, value in (meta or {}).items():
        lines.append(f"meta.{key}={value!r}")
    tensors = [("weight", k, v) for k, v in params.weights.items()]
    tensors += [("buffer", k, v) for k, v in params.buffers.items()]
    for kind, name, arr in tensors:
        lines.append(f"{kind} {name} {','.join(str(s) for s in arr.shape)}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(header)
        for _, _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[NetParams, dict]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(_MAGIC.encode()) or end < 0:
        raise Incompatible(f"{path} is not a checkpoint")
    try:
        lines = raw[:end].decode().splitlines()[1:]
        fields, meta, tensors = {}, {}, []
        for line in lines:
            if line.startswith(("weight ", "buffer ")):
                kind, name, shape = line.split(" ")
                tensors.append((kind, name, tuple(int(s) for s in shape.split(","))))
            else:
                key, _, value = line.partition("=")
                if key.startswith("meta."):
                    meta[key[5:]] = float(value)
                else:
                    fields[key] = int(value)
        cfg = NetConfig(fields["net.base_channels"], fields["net.depth"], bool(fields["net.batch_norm"]))
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise Incompatible(f"unreadable checkpoint header in {path}: {exc}") from None
    reference = init_params(cfg)
    offset = end + len(b"\nend\n")
    weights, buffers = {}, {}
    for kind, name, shape in tensors:
        nbytes = int(np.prod(shape)) * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise Incompatible(f"truncated payload for {name} in {path}")
        offset += nbytes
        arr = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        (weights if kind == "weight" else buffers)[name] = arr
    if offset != len(raw):
        raise Incompatible(f"trailing bytes in {path}")
    for ours, ref in ((weights, reference.weights), (buffers, reference.buffers)):
        if ours.keys() != ref.keys() or any(ours[k].shape != ref[k].shape for k in ref):
            raise Incompatible(f"tensor layout in {path} does not match its network config")
    return NetParams(cfg, weights, buffers), meta
