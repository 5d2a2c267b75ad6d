"""Small dense feedforward network with hand-written backprop and adam/sgd.

The network is the slow, generalising value learner of a CTDL agent (and the
actor of the continuous variants). It is evaluated one observation at a time.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, _steps
from ._steps import LOG_STD_MAX, LOG_STD_MIN
from .errors import ConfigurationError, ExplanationFormatError, NumericalError, UnsupportedVersionError

CHECKPOINT_VERSION = 1
ACTIVATIONS = {"relu": 0, "tanh": 1}
_LOG_2PI = math.log(2 * math.pi)


@dataclass
class Network:
    sizes: tuple[int, ...]
    params: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        self._sizes_arr = np.array(self.sizes, dtype=np.int64)
        self._act = ACTIVATIONS[self.activation]
        if self.params.shape != (n_params(self.sizes),):
            raise ConfigurationError("parameter vector does not match layer sizes")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def _offset(self, layer: int) -> int:
        off = 0
        for n_in, n_out in zip(self.sizes[:layer], self.sizes[1 : layer + 1]):
            off += n_in * n_out + n_out
        return off

    def weights(self, layer: int) -> np.ndarray:
        """View of layer ``layer``'s weight matrix, shape (out, in)."""
        off = self._offset(layer)
        n_in, n_out = self.sizes[layer], self.sizes[layer + 1]
        return self.params[off : off + n_in * n_out].reshape(n_out, n_in)

    def biases(self, layer: int) -> np.ndarray:
        off = self._offset(layer) + self.sizes[layer] * self.sizes[layer + 1]
        return self.params[off : off + self.sizes[layer + 1]]

    def copy(self) -> "Network":
        return Network(self.sizes, self.params.copy(), self.activation)

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "layer_sizes": list(self.sizes),
            "activation": self.activation,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        if d.get("version") != CHECKPOINT_VERSION:
            raise UnsupportedVersionError(f"unsupported network checkpoint version {d.get('version')!r}", "version")
        try:
            sizes = tuple(int(s) for s in d["layer_sizes"])
            params = np.array(d["params"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise ExplanationFormatError(f"bad network checkpoint: {e}") from None
        return cls(sizes, params, d.get("activation", "relu"))


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.algorithm!r}")
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.algorithm, self.lr, self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "lr": self.lr,
            "t": self.t,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "m": self.m.tolist(),
            "v": self.v.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        b1, b2 = d.get("betas", (0.9, 0.999))
        return cls(d["algorithm"], float(d["lr"]), np.array(d["m"], dtype=float), np.array(d["v"], dtype=float),
                   int(d["t"]), float(b1), float(b2), float(d.get("eps", 1e-8)))


def n_params(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def net_init(sizes, rng: np.random.Generator, activation: str = "relu") -> Network:
    """Weights ~ N(0, 1/fan_in), zero biases."""
    sizes = list(sizes)
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ConfigurationError(f"need at least two positive layer sizes, got {sizes}")
    params = np.zeros(n_params(sizes))
    net = Network(tuple(sizes), params, activation)
    for layer in range(net.n_layers):
        fan_in = sizes[layer]
        net.weights(layer)[...] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(sizes[layer + 1], fan_in))
    return net


def optimizer_for(net: Network, algorithm: str = "adam", lr: float = 1e-3) -> OptimizerState:
    n = net.params.size
    return OptimizerState(algorithm, lr, np.zeros(n), np.zeros(n))


def _as_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (net.sizes[0],):
        raise TypeError(f"input shape {x.shape} does not match input layer size {net.sizes[0]}")
    return x


def net_forward(net: Network, x) -> np.ndarray:
    return _kernels.forward(net.params, net._sizes_arr, net._act, _as_input(net, x))


def value_and_vjp(net: Network, x, dout) -> tuple[np.ndarray, np.ndarray]:
    """Output and gradient of ``dout . net(x)`` w.r.t. the flat parameters."""
    grad = np.empty_like(net.params)
    out = _kernels.vjp(net.params, net._sizes_arr, net._act, _as_input(net, x), np.asarray(dout, dtype=float), grad)
    return out, grad


def pack_net(net: Network) -> tuple:
    return (net.params, net._sizes_arr, net._act)


def pack_opt(net: Network, opt: OptimizerState) -> tuple:
    """Kernel view of ``opt``; the step counter travels in a 1-element array (see ``unpack_opt``)."""
    if opt.algorithm == "adam" and opt.m.shape != net.params.shape:
        opt.m = np.zeros_like(net.params)
        opt.v = np.zeros_like(net.params)
    return (0 if opt.algorithm == "sgd" else 1, float(opt.lr), opt.m, opt.v, np.array([opt.t], dtype=np.int64),
            float(opt.beta1), float(opt.beta2), float(opt.eps))


def unpack_opt(opt: OptimizerState, packed: tuple) -> None:
    opt.t = int(packed[4][0])


def apply_gradient(net: Network, opt: OptimizerState, grad: np.ndarray) -> None:
    packed = pack_opt(net, opt)
    if not _steps.apply_update(pack_net(net), packed, np.ascontiguousarray(grad, dtype=float)):
        raise NumericalError("non-finite gradient")
    unpack_opt(opt, packed)


def td_gradient(net: Network, x, output_index: int, td_error: float) -> np.ndarray:
    """Gradient of 0.5*(target - out[k])^2 for a fixed target, i.e. -td_error * d out[k]/d theta."""
    n_out = net.sizes[-1]
    if not 0 <= output_index < n_out:
        raise IndexError(f"output index {output_index} outside {n_out} outputs")
    dout = np.zeros(n_out)
    dout[output_index] = -td_error
    return value_and_vjp(net, x, dout)[1]


def net_td_step(net: Network, opt: OptimizerState, x, output_index: int, td_error: float) -> None:
    """One semi-gradient TD step on output ``output_index``. Mutates net and opt in place."""
    if not math.isfinite(td_error):
        raise NumericalError(f"non-finite TD error {td_error}")
    if td_error == 0.0:
        return
    apply_gradient(net, opt, td_gradient(net, x, output_index, td_error))


def gaussian_head(out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split actor output into (mean, clamped log_std, std)."""
    k = out.shape[0] // 2
    mean = out[:k]
    log_std = np.clip(out[k:], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std, np.exp(log_std)


def gaussian_log_prob(out: np.ndarray, action) -> float:
    mean, log_std, std = gaussian_head(out)
    a = np.asarray(action, dtype=float).reshape(-1)
    z = (a - mean) / std
    return float(np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI))


def policy_gradient(net: Network, x, action, advantage: float) -> np.ndarray:
    """Gradient of -advantage * log N(action | mean, std) w.r.t. the actor parameters.

    log_std is clamped to [LOG_STD_MIN, LOG_STD_MAX]; outside that range its gradient is zero.
    """
    x = _as_input(net, x)
    k = net.sizes[-1] // 2
    a = np.asarray(action, dtype=float).reshape(-1)
    if a.shape != (k,):
        raise TypeError(f"action shape {a.shape} does not match actor head of {k} dims")
    grad = np.empty_like(net.params)
    _steps.policy_grad(pack_net(net), x, a, float(advantage), grad)
    return grad


def net_policy_step(net: Network, opt: OptimizerState, x, action, advantage: float) -> None:
    if not math.isfinite(advantage):
        raise NumericalError(f"non-finite advantage {advantage}")
    if advantage == 0.0:
        return
    apply_gradient(net, opt, policy_gradient(net, x, action, advantage))


def save_network(net: Network, path) -> None:
    with open(path, "w") as f:
        json.dump(net.to_dict(), f)


def load_network(path) -> Network:
    with open(path) as f:
        return Network.from_dict(json.load(f))
