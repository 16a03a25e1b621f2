"""EEGNet, ShallowCNN and DeepCNN builders on top of :mod:`abat.autodiff`.

Inputs are (batch, channels, timepoints) arrays; a singleton feature-map axis
is added internally so convolutions run over (channel, time).

Layer hyperparameters that are not fixed by the published parameter counts
are frozen in :meth:`ArchSpec.published` and :meth:`ArchSpec.desk`:

* EEGNet: F1=4, D=2, F2=8, 'same' temporal kernel 68, separable kernel 16,
  average pools 4 and 8, dropout 0.25. 1676 parameters at (22, 1000, 4).
* DeepCNN: 25/50/100 kernels, all temporal kernels 5, conv biases on,
  max pools 2, dropout 0.5. 94,079 parameters at (22, 1000, 4).
* ShallowCNN: 40 kernels, temporal kernel 13, square, average pool 35
  stride 7, log, dropout 0.5. 57,804 parameters at (22, 1000, 4).
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

FAMILIES = ("eegnet", "shallow", "deep")

CHECKPOINT_MAGIC = b"ABATMDL"
CHECKPOINT_VERSION = 1


class ModeError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ArchSpec:
    """Architecture of one classifier.

    ``widths`` are kernel counts per block (EEGNet: F1 and F2), ``kernels``
    the temporal kernel lengths, ``pools`` the pooling sizes (ShallowCNN:
    size and stride). ``width_multiplier`` scales ``widths`` at build time.
    """

    family: str
    channels: int
    timepoints: int
    classes: int
    widths: tuple[int, ...] = ()
    kernels: tuple[int, ...] = ()
    pools: tuple[int, ...] = ()
    depth_multiplier: int = 2
    dropout: float = 0.25
    width_multiplier: float = 1.0
    seed: int = 0

    _DEFAULTS = {
        "eegnet": dict(widths=(4, 8), kernels=(68, 16), pools=(4, 8), dropout=0.25),
        "shallow": dict(widths=(40,), kernels=(13,), pools=(35, 7), dropout=0.5),
        "deep": dict(widths=(25, 50, 100), kernels=(5, 5, 5), pools=(2,), dropout=0.5),
    }

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        defaults = self._DEFAULTS[self.family]
        for key in ("widths", "kernels", "pools"):
            val = getattr(self, key)
            setattr(self, key, tuple(int(v) for v in (val or defaults[key])))
        if min(self.channels, self.timepoints) < 1 or self.classes < 2:
            raise ValueError("channels and timepoints must be positive and classes >= 2")

    @classmethod
    def published(cls, family: str, channels: int = 22, timepoints: int = 1000, classes: int = 4, seed: int = 0):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
        return cls(family, channels, timepoints, classes, seed=seed, **cls._DEFAULTS[family])

    @classmethod
    def desk(cls, family: str, channels: int = 8, timepoints: int = 128, classes: int = 4, seed: int = 0):
        """Small CPU-friendly variant: shorter kernels, a quarter of the Deep/Shallow width."""
        presets = {
            "eegnet": dict(widths=(4, 8), kernels=(16, 8), pools=(4, 8), dropout=0.25),
            "shallow": dict(widths=(40,), kernels=(13,), pools=(35, 7), dropout=0.5, width_multiplier=0.25),
            "deep": dict(widths=(25, 50, 100), kernels=(5, 5, 5), pools=(2,), dropout=0.5, width_multiplier=0.25),
        }
        if family not in presets:
            raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
        return cls(family, channels, timepoints, classes, seed=seed, **presets[family])

    @property
    def effective_widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(w * self.width_multiplier))) for w in self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("widths", "kernels", "pools"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


# ---------------------------------------------------------------- layers


class _Ctx:
    __slots__ = ("training", "rng", "track")

    def __init__(self, training: bool, rng, track: bool):
        self.training, self.rng, self.track = training, rng, track

    def p(self, t: Tensor | None) -> Tensor | None:
        if t is None or self.track:
            return t
        return Tensor(t.data)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    def __init__(self, rng, cin, cout, kh, kw, groups=1, bias=True, pad=(0, 0)):
        fan_in = (cin // groups) * kh * kw
        self.weight = Tensor(_uniform(rng, (cout, cin // groups, kh, kw), fan_in), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (cout,), fan_in), requires_grad=True) if bias else None
        self.groups, self.pad = groups, pad

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x, ctx):
        x = ad.pad_time(x, *self.pad)
        return ad.conv2d(x, ctx.p(self.weight), ctx.p(self.bias), groups=self.groups)

    def out_shape(self, shape):
        maps, h, w = shape
        kh, kw = self.weight.shape[2:]
        w = w + sum(self.pad)
        return (self.weight.shape[0], h - kh + 1, w - kw + 1)


class BatchNorm:
    def __init__(self, maps):
        self.weight = Tensor(np.ones(maps), requires_grad=True)
        self.bias = Tensor(np.zeros(maps), requires_grad=True)
        self.running_mean = np.zeros(maps)
        self.running_var = np.ones(maps)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x, ctx):
        return ad.batch_norm(
            x, ctx.p(self.weight), ctx.p(self.bias), self.running_mean, self.running_var, ctx.training
        )


class Pool:
    def __init__(self, kind, size, stride=None):
        self.kind, self.size, self.stride = kind, size, stride or size

    def __call__(self, x, ctx):
        fn = ad.avg_pool_time if self.kind == "avg" else ad.max_pool_time
        return fn(x, self.size, self.stride)

    def out_shape(self, shape):
        maps, h, w = shape
        return (maps, h, (w - self.size) // self.stride + 1 if w >= self.size else 0)


class Act:
    _FNS = {"elu": ad.elu, "square": ad.square, "log": ad.safe_log}

    def __init__(self, kind):
        self.kind = kind

    def __call__(self, x, ctx):
        return self._FNS[self.kind](x)


class Dropout:
    def __init__(self, rate):
        self.rate = rate

    def __call__(self, x, ctx):
        return ad.dropout(x, self.rate, ctx.rng, ctx.training)


class Dense:
    def __init__(self, rng, fin, fout):
        self.weight = Tensor(_uniform(rng, (fout, fin), fin), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (fout,), fin), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x, ctx):
        return ad.linear(ad.flatten(x), ctx.p(self.weight), ctx.p(self.bias))


def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


# ---------------------------------------------------------------- graph


class ModelGraph:
    """A built classifier: ordered named layers, parameters and BN buffers."""

    def __init__(self, arch: ArchSpec, layers: list[tuple[str, object]]):
        self.arch = arch
        self.layers = layers
        self.training = False
        self.rng: np.random.Generator | None = None

    def train(self, rng: np.random.Generator | None = None) -> "ModelGraph":
        self.training = True
        if rng is not None:
            self.rng = rng
        return self

    def eval(self) -> "ModelGraph":
        self.training = False
        return self

    @contextmanager
    def evaluating(self):
        """Temporarily switch to eval mode (e.g. to craft attacks mid-training)."""
        prev = self.training
        self.training = False
        try:
            yield self
        finally:
            self.training = prev

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers:
            if hasattr(layer, "params"):
                for pname, t in layer.params().items():
                    out[f"{name}.{pname}"] = t
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers:
            if hasattr(layer, "buffers"):
                for bname, arr in layer.buffers().items():
                    out[f"{name}.{bname}"] = arr
        return out

    @property
    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def forward(self, x, track_params: bool = True) -> Tensor:
        """Logits for a (batch, channels, time) input.

        With ``track_params=False`` parameters enter the graph as constants,
        so only input gradients are computed (attack crafting).
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        c, t = self.arch.channels, self.arch.timepoints
        if x.data.ndim != 3 or x.shape[1:] != (c, t):
            raise ShapeError(f"{self.arch.family}: expected input (batch, {c}, {t}), got {x.shape}")
        ctx = _Ctx(self.training, self.rng, track_params)
        h = ad.reshape(x, (x.shape[0], 1, c, t))
        for _, layer in self.layers:
            h = layer(h, ctx)
        return h

    __call__ = forward

    def predict(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits as a (batch, classes) array."""
        if self.training:
            raise ModeError("predict() needs eval mode; train mode would normalize with batch statistics")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        outs = [self.forward(X[i : i + batch_size], track_params=False).data for i in range(0, len(X), batch_size)]
        return np.concatenate(outs) if outs else np.empty((0, self.arch.classes))

    def classify(self, X: np.ndarray) -> np.ndarray:
        """Predicted class ids; ties resolve to the lowest class index."""
        return np.argmax(self.predict(X), axis=1)

    def state(self) -> dict[str, np.ndarray]:
        """Copies of all parameters and buffers, keyed by name."""
        out = {k: t.data.copy() for k, t in self.parameters().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.parameters(), self.buffers()
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise CheckpointError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, t in params.items():
            if state[k].shape != t.data.shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        for k, arr in bufs.items():
            if state[k].shape != arr.shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} != {arr.shape}")
            arr[...] = state[k]


def _check_length(family: str, layer: str, shape) -> None:
    if shape[1] < 1 or shape[2] < 1:
        raise ShapeError(f"{family}: input too short, layer {layer} would produce shape {shape}")


def _stack(arch: ArchSpec, rng, recipe) -> ModelGraph:
    layers = []
    shape = (1, arch.channels, arch.timepoints)
    for name, make in recipe:
        layer = make(shape)
        if hasattr(layer, "out_shape"):
            if isinstance(layer, Conv):
                kh, kw = layer.weight.shape[2:]
                if kh > shape[1] or kw > shape[2] + sum(layer.pad):
                    raise ShapeError(f"{arch.family}: layer {name} kernel {(kh, kw)} exceeds input {shape[1:]}")
            elif isinstance(layer, Pool) and layer.size > shape[2]:
                raise ShapeError(f"{arch.family}: layer {name} pool {layer.size} exceeds time length {shape[2]}")
            shape = layer.out_shape(shape)
            _check_length(arch.family, name, shape)
        layers.append((name, layer))
    return ModelGraph(arch, layers)


def build(arch: ArchSpec) -> ModelGraph:
    """Instantiate and seed-initialize a classifier for ``arch``."""
    rng = np.random.default_rng(arch.seed)
    c, k = arch.channels, arch.classes
    w = arch.effective_widths
    flat = lambda s: s[0] * s[1] * s[2]  # noqa: E731

    if arch.family == "eegnet":
        f1, f2 = w
        fd = f1 * arch.depth_multiplier
        kt, ks = arch.kernels
        p1, p2 = arch.pools
        recipe = [
            ("temporal", lambda s: Conv(rng, 1, f1, 1, kt, bias=False, pad=_same_pad(kt))),
            ("bn1", lambda s: BatchNorm(f1)),
            ("spatial", lambda s: Conv(rng, f1, fd, c, 1, groups=f1, bias=False)),
            ("bn2", lambda s: BatchNorm(fd)),
            ("elu1", lambda s: Act("elu")),
            ("pool1", lambda s: Pool("avg", p1)),
            ("drop1", lambda s: Dropout(arch.dropout)),
            ("separable_depth", lambda s: Conv(rng, fd, fd, 1, ks, groups=fd, bias=False, pad=_same_pad(ks))),
            ("separable_point", lambda s: Conv(rng, fd, f2, 1, 1, bias=False)),
            ("bn3", lambda s: BatchNorm(f2)),
            ("elu2", lambda s: Act("elu")),
            ("pool2", lambda s: Pool("avg", p2)),
            ("drop2", lambda s: Dropout(arch.dropout)),
            ("classifier", lambda s: Dense(rng, flat(s), k)),
        ]
    elif arch.family == "shallow":
        (f,) = w
        (kt,) = arch.kernels
        size, stride = arch.pools
        recipe = [
            ("temporal", lambda s: Conv(rng, 1, f, 1, kt)),
            ("spatial", lambda s: Conv(rng, f, f, c, 1)),
            ("bn", lambda s: BatchNorm(f)),
            ("square", lambda s: Act("square")),
            ("pool", lambda s: Pool("avg", size, stride)),
            ("log", lambda s: Act("log")),
            ("drop", lambda s: Dropout(arch.dropout)),
            ("classifier", lambda s: Dense(rng, flat(s), k)),
        ]
    else:
        f1, f2, f3 = w
        k1, k2, k3 = arch.kernels
        (p,) = arch.pools
        recipe = [
            ("temporal", lambda s: Conv(rng, 1, f1, 1, k1)),
            ("spatial", lambda s: Conv(rng, f1, f1, c, 1)),
            ("bn1", lambda s: BatchNorm(f1)),
            ("elu1", lambda s: Act("elu")),
            ("pool1", lambda s: Pool("max", p)),
            ("drop1", lambda s: Dropout(arch.dropout)),
            ("conv2", lambda s: Conv(rng, f1, f2, 1, k2)),
            ("bn2", lambda s: BatchNorm(f2)),
            ("elu2", lambda s: Act("elu")),
            ("pool2", lambda s: Pool("max", p)),
            ("drop2", lambda s: Dropout(arch.dropout)),
            ("conv3", lambda s: Conv(rng, f2, f3, 1, k3)),
            ("bn3", lambda s: BatchNorm(f3)),
            ("elu3", lambda s: Act("elu")),
            ("pool3", lambda s: Pool("max", p)),
            ("drop3", lambda s: Dropout(arch.dropout)),
            ("classifier", lambda s: Dense(rng, flat(s), k)),
        ]
    return _stack(arch, rng, recipe)


# ---------------------------------------------------------------- checkpoints

_U32 = struct.Struct("<I")


def save_checkpoint(path, model: ModelGraph, meta: dict | None = None) -> Path:
    """Write ``model`` as an ABATMDL file (float32 tensors, JSON header)."""
    path = Path(path)
    state = model.state()
    header = json.dumps(
        {"arch": model.arch.to_dict(), "meta": meta or {}, "tensors": list(state)}, sort_keys=True
    ).encode()
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(header)), header]
    for name, arr in state.items():
        raw = name.encode()
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path, expected_arch: ArchSpec | None = None) -> tuple[ModelGraph, dict]:
    """Read an ABATMDL file; returns the model (eval mode) and its metadata."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an ABATMDL checkpoint")
    off = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    (version,) = _U32.unpack(take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = _U32.unpack(take(4))
    header = json.loads(take(hlen))
    arch = ArchSpec.from_dict(header["arch"])
    # the init seed is irrelevant once weights are loaded
    if expected_arch is not None and replace(arch, seed=0) != replace(expected_arch, seed=0):
        raise CheckpointError(f"{path}: checkpoint architecture {arch} does not match {expected_arch}")
    state = {}
    while off < len(raw):
        (nlen,) = _U32.unpack(take(4))
        name = take(nlen).decode()
        (rank,) = _U32.unpack(take(4))
        dims = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        count = math.prod(dims)
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: tensor {name} holds non-finite values")
        state[name] = arr
    if list(state) != header["tensors"]:
        raise CheckpointError(f"{path}: tensor list disagrees with header")
    model = build(arch)
    model.load_state(state)
    return model.eval(), header["meta"]


def round_to_storage(model: ModelGraph) -> None:
    """Round parameters and buffers to float32 precision in place."""
    model.load_state({k: v.astype(np.float32).astype(np.float64) for k, v in model.state().items()})


def with_seed(arch: ArchSpec, seed: int) -> ArchSpec:
    return replace(arch, seed=seed)
