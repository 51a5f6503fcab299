"""Minimal differentiable networks: dense layers, one LSTM cell, Adam.

Parameters live in one flat float64 vector per network; ``NetSpec.offsets``
gives each layer's slice. ``forward`` returns a tape from which ``backward``
computes exact reverse-mode gradients, including through the LSTM gates and
into the incoming recurrent state, so callers can run truncated BPTT by
chaining tapes over time.

Dense weights are stored row-major as (n_in, n_out) followed by the bias.
LSTM parameters are W_x (n_in, 4H), W_h (H, 4H) and b (4H) with gate order
input, forget, candidate, output.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import (
    Annotated,
    Any,
    Callable,
    Dict,
    List,
    Literal,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from autophoto._utilities import FormatError, dumps_canonical, require_finite

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT: str = "autophoto-ckpt/1"
_MAGIC = CHECKPOINT_FORMAT.encode("ascii") + b"\n"

Activation = Literal["tanh", "relu", "identity"]


class DenseLayer(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["dense"] = "dense"
    n_in: int = Field(gt=0)
    n_out: int = Field(gt=0)
    activation: Activation = "tanh"

    @property
    def param_count(self) -> int:
        return self.n_in * self.n_out + self.n_out


class LSTMCellLayer(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["lstm_cell"] = "lstm_cell"
    n_in: int = Field(gt=0)
    hidden: int = Field(gt=0)

    @property
    def n_out(self) -> int:
        return self.hidden

    @property
    def param_count(self) -> int:
        return 4 * self.hidden * (self.n_in + self.hidden + 1)


LayerSpec = Annotated[Union[DenseLayer, LSTMCellLayer], Field(discriminator="kind")]


class NetSpec(BaseModel):
    """Ordered layer list; at most one LSTM cell."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    layers: Tuple[LayerSpec, ...] = ()

    @model_validator(mode="after")
    def _check_layers(self) -> "NetSpec":
        for prev, layer in zip(self.layers, self.layers[1:]):
            if prev.n_out != layer.n_in:
                raise ValueError(
                    f"layer dims incompatible: {prev.kind} outputs {prev.n_out}, "
                    f"next {layer.kind} expects {layer.n_in}"
                )
        if sum(isinstance(layer, LSTMCellLayer) for layer in self.layers) > 1:
            raise ValueError("a NetSpec may hold at most one lstm_cell")
        return self

    @classmethod
    def mlp(
        cls,
        sizes: Sequence[int],
        activation: Activation = "tanh",
        output_activation: Activation = "identity",
    ) -> "NetSpec":
        layers = [
            DenseLayer(
                n_in=a,
                n_out=b,
                activation=output_activation if i == len(sizes) - 2 else activation,
            )
            for i, (a, b) in enumerate(zip(sizes, sizes[1:]))
        ]
        return cls(layers=tuple(layers))

    @property
    def n_in(self) -> Optional[int]:
        return self.layers[0].n_in if self.layers else None

    @property
    def n_out(self) -> Optional[int]:
        return self.layers[-1].n_out if self.layers else None

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    @property
    def offsets(self) -> List[Tuple[int, int]]:
        bounds, start = [], 0
        for layer in self.layers:
            bounds.append((start, start + layer.param_count))
            start += layer.param_count
        return bounds

    @property
    def hidden_size(self) -> int:
        """Hidden size of the LSTM cell, 0 for feed-forward nets."""
        for layer in self.layers:
            if isinstance(layer, LSTMCellLayer):
                return layer.hidden
        return 0


class RecurrentState(NamedTuple):
    hidden: np.ndarray
    cell: np.ndarray


def zero_state(spec: NetSpec, batch: Optional[int] = None) -> RecurrentState:
    shape: Tuple[int, ...] = (spec.hidden_size,) if batch is None else (batch, spec.hidden_size)
    return RecurrentState(np.zeros(shape), np.zeros(shape))


def validate_params(spec: NetSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise ValueError(f"expected {spec.param_count} parameters, got shape {params.shape}")
    require_finite(params, "parameter vector")
    return params


def init_params(
    spec: NetSpec,
    rng: np.random.Generator,
    gains: Optional[Sequence[float]] = None,
    forget_bias: float = 1.0,
) -> np.ndarray:
    """Scaled-normal weights (variance gain^2 / fan_in), zero biases."""
    params = np.zeros(spec.param_count)
    gains = list(gains) if gains is not None else [1.0] * len(spec.layers)
    for layer, (lo, _), gain in zip(spec.layers, spec.offsets, gains):
        if isinstance(layer, DenseLayer):
            n_w = layer.n_in * layer.n_out
            params[lo : lo + n_w] = rng.normal(0.0, gain / np.sqrt(layer.n_in), n_w)
        else:
            h = layer.hidden
            n_x, n_h = layer.n_in * 4 * h, h * 4 * h
            params[lo : lo + n_x] = rng.normal(0.0, gain / np.sqrt(layer.n_in), n_x)
            params[lo + n_x : lo + n_x + n_h] = rng.normal(0.0, gain / np.sqrt(h), n_h)
            bias = lo + n_x + n_h
            params[bias + h : bias + 2 * h] = forget_bias
    return params


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_slope(y: np.ndarray, activation: Activation) -> Union[np.ndarray, float]:
    if activation == "tanh":
        return 1.0 - y * y
    if activation == "relu":
        return (y > 0.0).astype(np.float64)
    return 1.0


@dataclass(frozen=True)
class _DenseCache:
    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class _LSTMCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    tanh_c: np.ndarray
    w_x: np.ndarray
    w_h: np.ndarray


@dataclass(frozen=True)
class Tape:
    """Everything ``backward`` needs from one ``forward`` call."""

    spec: NetSpec
    caches: Tuple[Union[_DenseCache, _LSTMCache], ...]
    activations: Tuple[np.ndarray, ...]
    """Output of every layer, batched (B, n_out)."""
    single: bool


def forward(
    spec: NetSpec,
    params: np.ndarray,
    x: np.ndarray,
    state: Optional[RecurrentState] = None,
) -> Tuple[np.ndarray, RecurrentState, Tape]:
    """Run the network on one input vector or a (B, n_in) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch_x = x[None, :] if single else x
    if spec.n_in is not None and batch_x.shape[-1] != spec.n_in:
        raise ValueError(f"input has {batch_x.shape[-1]} features, net expects {spec.n_in}")
    require_finite(batch_x, "network input")

    n = batch_x.shape[0]
    if state is None:
        h_prev, c_prev = np.zeros((n, spec.hidden_size)), np.zeros((n, spec.hidden_size))
    else:
        h_prev = np.asarray(state.hidden, dtype=np.float64).reshape(n, spec.hidden_size)
        c_prev = np.asarray(state.cell, dtype=np.float64).reshape(n, spec.hidden_size)
    new_h, new_c = h_prev, c_prev

    caches: List[Union[_DenseCache, _LSTMCache]] = []
    activations: List[np.ndarray] = []
    act = batch_x
    for layer, (lo, hi) in zip(spec.layers, spec.offsets):
        p = params[lo:hi]
        if isinstance(layer, DenseLayer):
            n_w = layer.n_in * layer.n_out
            weights = p[:n_w].reshape(layer.n_in, layer.n_out)
            y = _activate(act @ weights + p[n_w:], layer.activation)
            caches.append(_DenseCache(act, y, weights))
        else:
            h = layer.hidden
            n_x, n_h = layer.n_in * 4 * h, h * 4 * h
            w_x = p[:n_x].reshape(layer.n_in, 4 * h)
            w_h = p[n_x : n_x + n_h].reshape(h, 4 * h)
            z = act @ w_x + h_prev @ w_h + p[n_x + n_h :]
            i, f = _sigmoid(z[:, :h]), _sigmoid(z[:, h : 2 * h])
            g, o = np.tanh(z[:, 2 * h : 3 * h]), _sigmoid(z[:, 3 * h :])
            new_c = f * c_prev + i * g
            tanh_c = np.tanh(new_c)
            new_h = o * tanh_c
            y = new_h
            caches.append(_LSTMCache(act, h_prev, c_prev, (i, f, g, o), tanh_c, w_x, w_h))
        activations.append(y)
        act = y

    output = act[0] if single else act
    new_state = RecurrentState(new_h[0], new_c[0]) if single else RecurrentState(new_h, new_c)
    return output, new_state, Tape(spec, tuple(caches), tuple(activations), single)


def backward(
    tape: Tape,
    output_gradient: np.ndarray,
    state_gradient: Optional[RecurrentState] = None,
) -> Tuple[np.ndarray, np.ndarray, RecurrentState]:
    """Reverse-mode pass: (param grads, input grad, grad w.r.t. incoming state).

    ``state_gradient`` is the gradient flowing into the new recurrent state
    from later time steps; omit it at the end of a sequence.
    """
    spec = tape.spec
    grad = np.asarray(output_gradient, dtype=np.float64)
    grad = grad[None, :] if tape.single else grad
    n = grad.shape[0]
    hidden = spec.hidden_size
    dh_next = np.zeros((n, hidden))
    dc_next = np.zeros((n, hidden))
    if state_gradient is not None:
        dh_next = np.asarray(state_gradient.hidden, dtype=np.float64).reshape(n, hidden)
        dc_next = np.asarray(state_gradient.cell, dtype=np.float64).reshape(n, hidden)
    d_h_prev, d_c_prev = np.zeros((n, hidden)), np.zeros((n, hidden))

    param_grads = np.zeros(spec.param_count)
    for layer, cache, (lo, hi) in reversed(list(zip(spec.layers, tape.caches, spec.offsets))):
        if isinstance(layer, DenseLayer):
            assert isinstance(cache, _DenseCache)
            dz = grad * _activation_slope(cache.y, layer.activation)
            n_w = layer.n_in * layer.n_out
            param_grads[lo : lo + n_w] = (cache.x.T @ dz).ravel()
            param_grads[lo + n_w : hi] = dz.sum(axis=0)
            grad = dz @ cache.weights.T
        else:
            assert isinstance(cache, _LSTMCache)
            i, f, g, o = cache.gates
            dh = grad + dh_next
            dc = dh * o * (1.0 - cache.tanh_c**2) + dc_next
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * cache.c_prev * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    dh * cache.tanh_c * o * (1.0 - o),
                ],
                axis=1,
            )
            n_x, n_h = cache.w_x.size, cache.w_h.size
            param_grads[lo : lo + n_x] = (cache.x.T @ dz).ravel()
            param_grads[lo + n_x : lo + n_x + n_h] = (cache.h_prev.T @ dz).ravel()
            param_grads[lo + n_x + n_h : hi] = dz.sum(axis=0)
            d_h_prev = dz @ cache.w_h.T
            d_c_prev = dc * f
            grad = dz @ cache.w_x.T

    if tape.single:
        return param_grads, grad[0], RecurrentState(d_h_prev[0], d_c_prev[0])
    return param_grads, grad, RecurrentState(d_h_prev, d_c_prev)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------
class AdamState(NamedTuple):
    m: np.ndarray
    v: np.ndarray
    t: int


def adam_init(n: int) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns fresh arrays."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    require_finite(grads, "gradient")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------
def numeric_gradient(
    fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    h: float = 1e-5,
    coords: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of a scalar function at the selected coordinates."""
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    coords = np.arange(params.size) if coords is None else coords
    probe = np.array(params, dtype=np.float64, copy=True)
    numeric = np.empty(len(coords))
    for j, k in enumerate(coords):
        original = probe[k]
        probe[k] = original + h
        plus = fn(probe)
        probe[k] = original - h
        minus = fn(probe)
        probe[k] = original
        numeric[j] = (plus - minus) / (2.0 * h)
    return numeric


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def sample_coords(n: int, max_coords: Optional[int], seed: int = 0) -> np.ndarray:
    if max_coords is None or n <= max_coords:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=max_coords, replace=False))


def finite_diff_check(
    spec: NetSpec,
    params: np.ndarray,
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    h: float = 1e-5,
    state: Optional[RecurrentState] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
    analytic: Optional[np.ndarray] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` maps the network output to ``(loss, d loss / d output)``.
    Pass ``analytic`` to audit a gradient computed elsewhere; large nets are
    checked on a seeded sample of ``max_coords`` coordinates.
    """
    if analytic is None:
        output, _, tape = forward(spec, params, x, state)
        _, d_output = loss_fn(output)
        analytic = backward(tape, d_output)[0]
    coords = sample_coords(params.size, max_coords, seed)

    def loss_at(p: np.ndarray) -> float:
        return float(loss_fn(forward(spec, p, x, state)[0])[0])

    numeric = numeric_gradient(loss_at, params, h, coords)
    return max_relative_error(np.asarray(analytic)[coords], numeric)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Checkpoint:
    nets: Dict[str, NetSpec]
    params: np.ndarray
    extra: Dict[str, Any]


def save_checkpoint(
    path: Union[str, Path],
    nets: Dict[str, NetSpec],
    params: np.ndarray,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    """Tag line, uint32 header length, JSON header, uint64 count, float64 LE."""
    params = np.asarray(params, dtype=np.float64)
    expected = sum(spec.param_count for spec in nets.values())
    if params.size != expected:
        raise ValueError(f"checkpoint holds {params.size} parameters, nets need {expected}")
    header = dumps_canonical(
        {
            "format": CHECKPOINT_FORMAT,
            "nets": {name: spec.model_dump() for name, spec in nets.items()},
            "order": list(nets),
            "extra": extra or {},
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.astype("<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise FormatError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    try:
        offset = len(_MAGIC)
        (header_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
        offset += header_len
        (count,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        params = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        nets = {name: NetSpec.model_validate(header["nets"][name]) for name in header["order"]}
    except (struct.error, ValueError, KeyError) as e:
        raise FormatError(f"{path}: corrupt checkpoint ({e})") from e
    if params.size != sum(spec.param_count for spec in nets.values()):
        raise FormatError(f"{path}: parameter count does not match the stored nets")
    return Checkpoint(nets=nets, params=params, extra=header.get("extra", {}))
