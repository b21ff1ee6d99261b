"""Convolutional embedding network with hand-written backpropagation.

Each block is a same-padded k x k convolution, ReLU and a 2 x 2 stride-2 max
pool; the blocks are followed by global average pooling and a dense layer
onto the 1024-dimensional embedding. Activations are channels-last,
``(batch, time, freq, channels)``.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    NoCachedActivations,
    NonFiniteEmbedding,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
    WidthTooSmall,
)

CHANNEL_PLAN = (16, 32, 64, 128, 256)
EMBEDDING_DIM = 1024
INPUT_HEIGHT = 256
MIN_WIDTH = 16
FULL_DEPTH_WIDTH = 32  # five 2x poolings need at least 2**5 frames

CHECKPOINT_MAGIC = b"TLFV"
CHECKPOINT_VERSION = 1


def depth_for_width(width):
    return 5 if width >= FULL_DEPTH_WIDTH else 4


@dataclass(frozen=True)
class NetConfig:
    input_width: int
    input_height: int = INPUT_HEIGHT
    n_blocks: int = 0  # 0 selects the depth rule
    channels: tuple = ()  # empty selects the first n_blocks of CHANNEL_PLAN
    kernel: int = 3
    embedding_dim: int = EMBEDDING_DIM
    learning_rate: float = 1e-3
    optimizer: str = "sgd"
    momentum: float = 0.9
    init_seed: int = 0

    def __post_init__(self):
        if self.input_width < MIN_WIDTH:
            raise WidthTooSmall(f"input width {self.input_width} < {MIN_WIDTH}")
        if self.input_height != INPUT_HEIGHT:
            raise ValueError(f"input_height is fixed at {INPUT_HEIGHT}")
        if self.embedding_dim != EMBEDDING_DIM:
            raise ValueError(f"embedding_dim is fixed at {EMBEDDING_DIM}")
        depth = depth_for_width(self.input_width)
        if self.n_blocks == 0:
            object.__setattr__(self, "n_blocks", depth)
        elif self.n_blocks != depth:
            raise ValueError(f"width {self.input_width} requires {depth} blocks, not {self.n_blocks}")
        chans = tuple(int(c) for c in self.channels) or CHANNEL_PLAN[: self.n_blocks]
        if len(chans) != self.n_blocks or min(chans) < 1:
            raise ValueError(f"need {self.n_blocks} positive channel counts, got {chans}")
        object.__setattr__(self, "channels", chans)
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd size")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d.get("channels", ()))
        return cls(**d)

    def param_shapes(self):
        shapes = []
        c_in = 1
        for i, c_out in enumerate(self.channels):
            shapes.append((f"conv{i}.weight", (self.kernel, self.kernel, c_in, c_out)))
            shapes.append((f"conv{i}.bias", (c_out,)))
            c_in = c_out
        shapes.append(("dense.weight", (c_in, self.embedding_dim)))
        shapes.append(("dense.bias", (self.embedding_dim,)))
        return shapes

    def width_trace(self):
        trace = [self.input_width]
        for _ in range(self.n_blocks):
            trace.append(trace[-1] // 2)
        return trace


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    source: tuple = ("", 0.0)
    speaker_id: str | None = None


# -- layer kernels -----------------------------------------------------------

def _conv_forward(x, w, b):
    k = w.shape[0]
    pad = k // 2
    bsz, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    if k == 1:
        cols = xp
    else:
        cols = np.concatenate(
            [xp[:, i : i + h, j : j + wd, :] for i in range(k) for j in range(k)], axis=-1
        )
    cols2d = cols.reshape(bsz * h * wd, k * k * c)
    out = cols2d @ w.reshape(k * k * c, -1) + b
    return out.reshape(bsz, h, wd, -1), cols2d


def _conv_backward(dout, cols2d, w, x_shape, need_dx):
    k = w.shape[0]
    pad = k // 2
    bsz, h, wd, c = x_shape
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = (cols2d.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(k * k * c, -1).T).reshape(bsz, h, wd, k * k, c)
    dxp = np.zeros((bsz, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, i * k + j, :]
    return dxp[:, pad : pad + h, pad : pad + wd, :], dw, db


def _pool_forward(a):
    h2, w2 = a.shape[1] // 2, a.shape[2] // 2
    a00 = a[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    a01 = a[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    a10 = a[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    a11 = a[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    m = np.maximum(np.maximum(a00, a01), np.maximum(a10, a11))
    # first occurrence in row-major window order wins ties
    arg = np.where(a00 == m, 0, np.where(a01 == m, 1, np.where(a10 == m, 2, 3))).astype(np.int8)
    return m, arg


def _pool_backward(g, arg, in_shape):
    h2, w2 = g.shape[1], g.shape[2]
    dx = np.zeros(in_shape, dtype=g.dtype)
    for n, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, di : 2 * h2 : 2, dj : 2 * w2 : 2] = np.where(arg == n, g, 0)
    return dx


class Network:
    def __init__(self, config, params):
        self.config = config
        expected = config.param_shapes()
        if [n for n, _ in expected] != list(params):
            raise ShapeMismatch(f"parameter names {list(params)} do not match config")
        for name, shape in expected:
            if tuple(params[name].shape) != shape:
                raise ShapeMismatch(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = params
        self._cache = None

    @property
    def dtype(self):
        return self.params["dense.bias"].dtype

    def copy(self):
        return Network(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        return Network(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.config.input_width, self.config.input_height):
            raise ShapeMismatch(
                f"input {x.shape[1:] if x.ndim == 3 else x.shape} does not match "
                f"({self.config.input_width}, {self.config.input_height})"
            )
        return x

    def forward(self, x, training=False):
        """Embed a batch ``(B, W, 256)``; returns ``(B, 1024)``."""
        x = self._check_input(x)[..., None]
        cache = []
        for i in range(self.config.n_blocks):
            w, b = self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"]
            z, cols = _conv_forward(x, w, b)
            a = np.maximum(z, 0)
            p, arg = _pool_forward(a)
            if training:
                cache.append((x.shape, cols, z > 0, arg, a.shape))
            x = p
        spatial = x.shape[1] * x.shape[2]
        feat = x.mean(axis=(1, 2))
        out = feat @ self.params["dense.weight"] + self.params["dense.bias"]
        if not np.all(np.isfinite(out)):
            raise NonFiniteEmbedding("forward produced NaN or Inf")
        if training:
            self._cache = (cache, feat, x.shape, spatial)
        return out

    def backward(self, upstream):
        """Reverse-mode gradients of ``sum(upstream * forward(x))`` for every parameter."""
        if self._cache is None:
            raise NoCachedActivations("run forward(..., training=True) first")
        cache, feat, pooled_shape, spatial = self._cache
        g = np.asarray(upstream, dtype=self.dtype)
        if g.shape != (feat.shape[0], self.config.embedding_dim):
            raise ShapeMismatch(f"upstream gradient shape {g.shape}")
        grads = {
            "dense.weight": feat.T @ g,
            "dense.bias": g.sum(axis=0),
        }
        dfeat = g @ self.params["dense.weight"].T
        dx = np.broadcast_to(
            (dfeat / spatial)[:, None, None, :], pooled_shape
        ).astype(self.dtype)
        for i in reversed(range(self.config.n_blocks)):
            x_shape, cols, active, arg, a_shape = cache[i]
            da = _pool_backward(dx, arg, a_shape)
            dz = da * active
            dx, dw, db = _conv_backward(dz, cols, self.params[f"conv{i}.weight"], x_shape, i > 0)
            grads[f"conv{i}.weight"] = dw
            grads[f"conv{i}.bias"] = db
        self._cache = None
        return {name: grads[name] for name in self.params}

    def embed(self, patches, batch_size=64):
        """Inference over many patches, batched to bound memory."""
        arr = np.asarray(patches)
        if arr.ndim == 2:
            arr = arr[None]
        outs = [self.forward(arr[i : i + batch_size]) for i in range(0, arr.shape[0], batch_size)]
        if not outs:
            return np.zeros((0, self.config.embedding_dim), dtype=self.dtype)
        return np.concatenate(outs, axis=0)


def init_params(config, dtype=np.float32):
    rng = np.random.default_rng(config.init_seed)
    params = {}
    fan_in = 1
    for name, shape in config.param_shapes():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[:-1]))
            gain = 6.0 if name.startswith("conv") else 3.0
            bound = np.sqrt(gain / fan_in)
        else:
            # biases follow their weight, so fan_in is the layer's
            bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def build(config, dtype=np.float32):
    return Network(config, init_params(config, dtype))


def forward(net, patch, training=False):
    """Embed a single :class:`SpectrogramPatch` (or raw ``(W, 256)`` array)."""
    values = getattr(patch, "values", patch)
    out = net.forward(values, training=training)[0]
    return Embedding(
        out,
        source=(getattr(patch, "source_id", ""), getattr(patch, "start_ms", 0.0)),
        speaker_id=getattr(patch, "speaker_id", None) or None,
    )


def backward(net, upstream):
    return net.backward(upstream)


@dataclass
class SGD:
    """Plain SGD, or heavy-ball momentum with ``v <- mu v + g; p <- p - lr v``."""

    learning_rate: float = 1e-3
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, config):
        mu = config.momentum if config.optimizer == "sgd_momentum" else 0.0
        return cls(config.learning_rate, mu)

    def step(self, params, grads):
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if self.momentum:
                v = self.velocity.get(name)
                v = g.astype(p.dtype) if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            p -= (self.learning_rate * g).astype(p.dtype)


def step(net, grads, optimizer):
    optimizer.step(net.params, grads)
    return net


# -- checkpoint --------------------------------------------------------------
#
#   magic "TLFV" | u16 version | u32 n | n bytes config JSON (UTF-8, sorted keys)
#   u32 tensor count, then per tensor:
#   u16 name length | name | u8 ndim | ndim x u32 dims | float32 data
#   all integers and floats little-endian.

def encode_checkpoint(net):
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(net.params)))
    for name, arr in net.params.items():
        raw = name.encode("ascii")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(net))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data):
    r = _Reader(bytes(data))
    if len(data) < 4:
        raise TruncatedFile("file shorter than the magic")
    if r.take(4) != CHECKPOINT_MAGIC:
        raise BadMagic("not a TLFV checkpoint")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, reader supports {CHECKPOINT_VERSION}")
    (n_cfg,) = r.unpack("<I")
    config = NetConfig.from_dict(json.loads(r.take(n_cfg).decode("utf-8")))
    (n_tensors,) = r.unpack("<I")
    params = {}
    for _ in range(n_tensors):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("ascii")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float32)
    if r.pos != len(data):
        raise ValueError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return Network(config, params)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
