"""Dense one-hidden-layer networks with exact backprop, BCE and Adam.

Everything here is float64 numpy. The networks are small enough that a
hand-written backward pass is simpler than pulling in an autodiff engine, and
it keeps training bit-reproducible for a given seed and data order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

BCE_EPS = 1e-7

# sigmoid is clamped into the open interval so log() never sees 0 or 1
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)

OUTPUT_ACTIVATIONS = ("sigmoid", "identity")


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


class StaleCacheError(RuntimeError):
    """Raised when backward() gets a cache from a different forward pass."""


class FormatError(ValueError):
    """Raised for malformed on-disk containers."""


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _SIG_LO, _SIG_HI)


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    out: np.ndarray
    owner: int
    version: int


@dataclass
class Mlp:
    """x -> act_out(W2 relu(W1 x + b1) + b2), applied row-wise to a batch."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    output: str = "sigmoid"
    version: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output!r}")
        for name in ("W1", "b1", "W2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, d = self.W1.shape
        o, h2 = self.W2.shape
        if self.b1.shape != (h,) or h2 != h or self.b2.shape != (o,):
            raise DimensionError(
                f"inconsistent shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")

    @classmethod
    def init(
        cls,
        in_dim: int,
        hidden_dim: int,
        out_dim: int = 1,
        output: str = "sigmoid",
        rng: np.random.Generator | None = None,
        zero_output: bool = False,
    ) -> "Mlp":
        if min(in_dim, hidden_dim, out_dim) <= 0:
            raise DimensionError("layer sizes must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        W1 = glorot_uniform(rng, hidden_dim, in_dim)
        if zero_output:
            W2 = np.zeros((out_dim, hidden_dim))
        else:
            W2 = glorot_uniform(rng, out_dim, hidden_dim)
        return cls(W1, np.zeros(hidden_dim), W2, np.zeros(out_dim), output)

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def num_params(self) -> int:
        return sum(a.size for a in self.params().values())

    def copy(self) -> "Mlp":
        return Mlp(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.output)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"expected batch with {self.in_dim} columns, got shape {x.shape}")
        return x

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = self._check_input(x)
        pre = x @ self.W1.T + self.b1
        hidden = np.maximum(pre, 0.0)
        z = hidden @ self.W2.T + self.b2
        out = sigmoid(z) if self.output == "sigmoid" else z
        return out, ForwardCache(x, pre, hidden, out, id(self), self.version)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        return np.maximum(x @ self.W1.T + self.b1, 0.0) @ self.W2.T + self.b2

    def backward(
        self, cache: ForwardCache, grad_out: np.ndarray
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of sum(grad_out * out) w.r.t. parameters and input."""
        if cache.owner != id(self) or cache.version != self.version:
            raise StaleCacheError("cache does not belong to the current parameters")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != cache.out.shape:
            raise DimensionError(f"grad shape {grad_out.shape} != output shape {cache.out.shape}")
        if self.output == "sigmoid":
            dz = grad_out * cache.out * (1.0 - cache.out)
        else:
            dz = grad_out
        grads = {"W2": dz.T @ cache.hidden, "b2": dz.sum(axis=0)}
        dpre = (dz @ self.W2) * (cache.pre > 0)
        grads["W1"] = dpre.T @ cache.x
        grads["b1"] = dpre.sum(axis=0)
        return grads, dpre @ self.W1


def bce_loss(predictions: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the predictions.

    Predictions are clipped to [BCE_EPS, 1 - BCE_EPS]; the gradient is the
    analytic derivative evaluated at the clipped value.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"predictions {p.shape} vs labels {y.shape}")
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = (p - y) / (p * (1.0 - p)) / n
    return float(loss), grad


class Adam:
    """Bias-corrected Adam over the parameter dict of one network."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, net: Mlp, grads: dict[str, np.ndarray]) -> None:
        params = net.params()
        if set(grads) != set(params):
            raise DimensionError(f"gradient keys {sorted(grads)} != parameter keys {sorted(params)}")
        for name, p in params.items():
            if grads[name].shape != p.shape:
                raise DimensionError(f"{name}: grad {grads[name].shape} vs param {p.shape}")
        if not self.m:
            self.m = {k: np.zeros_like(p) for k, p in params.items()}
            self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        net.version += 1


def _loss_for(net: Mlp) -> Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]:
    if net.output == "sigmoid":
        return bce_loss

    def half_mse(pred, target):
        diff = pred - target
        return float(0.5 * np.mean(diff**2)), diff / diff.size

    return half_mse


def gradient_check(
    net: Mlp, batch: np.ndarray, labels: np.ndarray, h: float = 1e-5, floor: float = 1e-6
) -> float:
    """Max relative error between backprop and central differences.

    Uses BCE for sigmoid nets and half mean squared error for identity nets.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    loss_fn = _loss_for(net)
    out, cache = net.forward(batch)
    _, dout = loss_fn(out, labels)
    analytic, _ = net.backward(cache, dout)

    worst = 0.0
    for name, p in net.params().items():
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(net(batch), labels)[0]
            flat[i] = orig - h
            down = loss_fn(net(batch), labels)[0]
            flat[i] = orig
            num = (up - down) / (2 * h)
            denom = max(abs(a_flat[i]), abs(num), floor)
            worst = max(worst, abs(a_flat[i] - num) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"QANN"
_CONTAINER_VERSION = 1


def write_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a versioned container: magic, u32 version, u32 header length,
    JSON header (shapes + caller metadata), then raw little-endian f64 data.
    Output bytes depend only on the inputs."""
    names = sorted(arrays)
    header = {
        "meta": meta,
        "arrays": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _CONTAINER_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != _CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return header["meta"], arrays


def mlp_arrays(net: Mlp, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in net.params().items()}


def mlp_from_arrays(arrays: dict[str, np.ndarray], output: str, prefix: str = "") -> Mlp:
    return Mlp(*(arrays[prefix + k] for k in ("W1", "b1", "W2", "b2")), output=output)


def save_mlp(path: str | Path, net: Mlp, meta: dict | None = None) -> None:
    write_container(path, {"output": net.output, **(meta or {})}, mlp_arrays(net))


def load_mlp(path: str | Path) -> tuple[Mlp, dict]:
    meta, arrays = read_container(path)
    return mlp_from_arrays(arrays, meta["output"]), meta
