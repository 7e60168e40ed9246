"""Siamese embedding network, Adam, parameter snapshots and checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, PersistenceError, SnapshotError

CHECKPOINT_FORMAT = 1
_LE = np.dtype("<f8")


@dataclass(frozen=True)
class NetConfig:
    input: tuple[int, int, int] = (1, 16, 16)
    conv_blocks: int = 2
    conv_channels: tuple[int, ...] | None = None
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "input", tuple(int(v) for v in self.input))
        object.__setattr__(self, "hidden_dims", tuple(int(v) for v in self.hidden_dims))
        if self.conv_channels is None:
            object.__setattr__(self, "conv_channels", tuple(8 * 2**i for i in range(self.conv_blocks)))
        else:
            object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        self.validate()

    def validate(self) -> None:
        if len(self.input) != 3 or min(self.input) < 1:
            raise ConfigError(f"input must be three positive ints (c,h,w), got {self.input}")
        if self.conv_blocks < 0:
            raise ConfigError("conv_blocks must be >= 0")
        if len(self.conv_channels) != self.conv_blocks or any(c < 1 for c in self.conv_channels):
            raise ConfigError("conv_channels must list one positive width per conv block")
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigError("hidden_dims must be positive")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be >= 2")
        _, h, w = self.input
        for i in range(self.conv_blocks):
            if h < 3 or w < 3:
                raise ConfigError(f"conv block {i} sees {h}x{w}; need at least 3x3")
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigError("spatial size collapses to zero after pooling")

    def flat_dim(self) -> int:
        c, h, w = self.input
        for width in self.conv_channels:
            c, h, w = width, h // 2, w // 2
        return c * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def layer_of(param_name: str) -> str:
    return param_name.split(".", 1)[0]


def _param_shapes(config: NetConfig) -> list[tuple[str, tuple[int, ...], int, int]]:
    """(name, shape, fan_in, fan_out) in forward order."""
    shapes = []
    c_in = config.input[0]
    for i, c_out in enumerate(config.conv_channels):
        shapes.append((f"conv{i}.weight", (c_out, c_in, 3, 3), c_in * 9, c_out * 9))
        shapes.append((f"conv{i}.bias", (c_out,), 0, 0))
        c_in = c_out
    d_in = config.flat_dim()
    for i, d_out in enumerate(config.hidden_dims):
        shapes.append((f"fc{i}.weight", (d_in, d_out), d_in, d_out))
        shapes.append((f"fc{i}.bias", (d_out,), 0, 0))
        d_in = d_out
    shapes.append(("head.weight", (d_in, config.embed_dim), d_in, config.embed_dim))
    shapes.append(("head.bias", (config.embed_dim,), 0, 0))
    return shapes


@dataclass
class EmbeddingNet:
    config: NetConfig
    params: dict[str, Tensor]
    frozen: set[str] = field(default_factory=set)

    @property
    def layers(self) -> list[str]:
        return list(dict.fromkeys(layer_of(n) for n in self.params))

    def forward(self, images, trace: list | None = None) -> Tensor:
        """Embed a batch ``[n,c,h,w]`` (or a single ``[c,h,w]`` image).

        When ``trace`` is a list, the raw inputs of every ReLU and max-pool are
        appended to it; tests use them to stay clear of kinks.
        """
        x = images if isinstance(images, Tensor) else Tensor._wrap(np.asarray(images, dtype=np.float64), False)
        single = x.data.ndim == 3
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if x.data.ndim != 4 or x.shape[1:] != self.config.input:
            raise DimensionError(f"image shape {x.shape[1:]} does not match config input {self.config.input}")
        p = self.params
        for i in range(self.config.conv_blocks):
            x = ad.conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            if trace is not None:
                trace.append(("relu", x.data))
            x = ad.relu(x)
            if trace is not None:
                trace.append(("pool", x.data))
            x = ad.maxpool2d(x)
        x = ad.reshape(x, (x.shape[0], -1))
        for i in range(len(self.config.hidden_dims)):
            x = ad.linear(x, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            if trace is not None:
                trace.append(("relu", x.data))
            x = ad.relu(x)
        x = ad.linear(x, p["head.weight"], p["head.bias"])
        x = ad.l2_normalize(x)
        return ad.reshape(x, (self.config.embed_dim,)) if single else x

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def embed(net: EmbeddingNet, image) -> Tensor:
    """Unit-norm embedding of one ``[c,h,w]`` image."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise DimensionError(f"embed expects a single (c,h,w) image, got shape {img.shape}")
    return net.forward(img)


def embed_batch(net: EmbeddingNet, images) -> Tensor:
    return net.forward(images)


def embed_numpy(net: EmbeddingNet, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Graph-free embedding of many images, for evaluation."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    with ad.no_grad():
        for start in range(0, len(images), chunk):
            out.append(net.forward(images[start:start + chunk]).data)
    if not out:
        return np.zeros((0, net.config.embed_dim))
    return np.concatenate(out, axis=0)


def init_xavier(config: NetConfig, seed: int) -> EmbeddingNet:
    """Xavier-uniform weights, zero biases; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in, fan_out in _param_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor._wrap(data, True)
    return EmbeddingNet(config, params)


# ---------------------------------------------------------------------------
# snapshots and freezing


@dataclass(frozen=True)
class ParameterSnapshot:
    params: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.params)


def snapshot(net: EmbeddingNet) -> ParameterSnapshot:
    copies = {}
    for name, t in net.params.items():
        arr = t.data.copy()
        arr.flags.writeable = False
        copies[name] = arr
    return ParameterSnapshot(copies)


def restore(net: EmbeddingNet, snap: ParameterSnapshot) -> None:
    if list(snap.params) != list(net.params):
        raise SnapshotError("snapshot parameter names do not match the network")
    for name, t in net.params.items():
        if snap.params[name].shape != t.shape:
            raise SnapshotError(f"shape mismatch for {name}")
        t.data = snap.params[name].copy()
        t.grad = None


def clone_from(snap: ParameterSnapshot, config: NetConfig) -> EmbeddingNet:
    net = init_xavier(config, 0)
    restore(net, snap)
    return net


def freeze(net: EmbeddingNet, layer_names: Iterable[str]) -> None:
    layer_names = set(layer_names)
    unknown = layer_names - set(net.layers)
    if unknown:
        raise ConfigError(f"cannot freeze unknown layers {sorted(unknown)}")
    net.frozen |= layer_names


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: EmbeddingNet, lr: float = 1e-3, **kw) -> "AdamState":
        m = {n: np.zeros_like(t.data) for n, t in net.params.items()}
        v = {n: np.zeros_like(t.data) for n, t in net.params.items()}
        return cls(m, v, lr=lr, **kw)


def adam_step(net: EmbeddingNet, state: AdamState) -> None:
    """Bias-corrected Adam update of unfrozen parameters; clears all grads."""
    for name, p in net.params.items():
        if layer_of(name) not in net.frozen and p.grad is None:
            raise ContractError(f"no gradient for trainable parameter {name}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for name, p in net.params.items():
        if layer_of(name) in net.frozen:
            p.grad = None
            continue
        g = p.grad
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blob


def _blob_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".bin")


def save_checkpoint(net: EmbeddingNet, state: AdamState, path) -> None:
    path = Path(path)
    records, chunks, offset = [], [], 0
    for name, t in net.params.items():
        n = t.data.size
        records.append({"name": name, "shape": list(t.shape), "offset": offset, "length": n})
        offset += n * 8
        chunks.append(t.data.reshape(-1))
    chunks += [state.m[n].reshape(-1) for n in net.params]
    chunks += [state.v[n].reshape(-1) for n in net.params]
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "config": net.config.to_dict(),
        "frozen": sorted(net.frozen),
        "params": records,
        "adam": {"t": state.t, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "blob": _blob_path(path).name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = np.concatenate(chunks).astype(_LE).tobytes() if chunks else b""
    _blob_path(path).write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path) -> tuple[EmbeddingNet, AdamState]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        blob = (path.parent / manifest["blob"]).read_bytes()
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if manifest["format_version"] != CHECKPOINT_FORMAT:
            raise PersistenceError(f"unsupported checkpoint format {manifest['format_version']}")
        config = NetConfig.from_dict(manifest["config"])
        expected = [(n, s) for n, s, _, _ in _param_shapes(config)]
        records = manifest["params"]
        adam = manifest["adam"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise PersistenceError(f"corrupt checkpoint manifest {path}: {exc}") from exc
    if [(r["name"], tuple(r["shape"])) for r in records] != expected:
        raise PersistenceError("checkpoint parameter records do not match the config")
    offset = 0
    for r in records:
        if int(np.prod(r["shape"])) != r["length"] or r["offset"] != offset:
            raise PersistenceError(f"inconsistent record for {r['name']}")
        offset += r["length"] * 8
    if len(blob) != 3 * offset:
        raise PersistenceError(f"blob has {len(blob)} bytes, manifest implies {3 * offset}")
    values = np.frombuffer(blob, dtype=_LE).astype(np.float64)
    total = offset // 8
    sections = [values[:total], values[total:2 * total], values[2 * total:]]
    params, m, v = {}, {}, {}
    for r in records:
        lo, hi = r["offset"] // 8, r["offset"] // 8 + r["length"]
        shape = tuple(r["shape"])
        params[r["name"]] = Tensor._wrap(sections[0][lo:hi].reshape(shape).copy(), True)
        m[r["name"]] = sections[1][lo:hi].reshape(shape).copy()
        v[r["name"]] = sections[2][lo:hi].reshape(shape).copy()
    net = EmbeddingNet(config, params, set(manifest.get("frozen", [])))
    state = AdamState(m, v, t=int(adam["t"]), lr=float(adam["lr"]), beta1=float(adam["beta1"]),
                      beta2=float(adam["beta2"]), eps=float(adam.get("eps", 1e-8)))
    return net, state
