"""Toy velocity-field MLP trained with flow matching.

The network sees ``[x, sinusoidal(t), cond]`` and predicts a velocity of the
same dimension as ``x``.  Hidden layers use ``tanh``; the output layer is
linear.  Gradients are derived by hand and optimised with AdamW.

Checkpoints are JSON documents::

    {"format_version": 1, "kind": "mlp_velocity_field",
     "layer_widths": [...], "data_dim": 2, "time_dim": 16, "cond_dim": 0,
     "activation": "tanh", "encoding": "base64-f64le",
     "params": [{"name": "W0", "shape": [r, c], "data": "<base64>"}, ...]}

Every parameter array is stored as little-endian IEEE-754 float64 in
row-major order, base64-encoded, so a load/save roundtrip is bit-exact.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import SIGMA_MIN, draw_training_arrays
from .numerics import Rng, as_tensor
from .sampler import GuidanceConfig, TimeSchedule, solve

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


def time_features(t, dim: int) -> np.ndarray:
    """Fixed sinusoidal features of ``t``: ``sin``/``cos`` at frequencies ``pi * 2**k``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if dim == 0:
        return np.zeros((t.size, 0))
    if dim % 2:
        raise ValueError("time embedding dimension must be even")
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class MlpVelocityField:
    """Velocity field ``u(x, t, cond)`` backed by a tanh MLP.

    ``cond=None`` feeds a zero conditioning vector, which doubles as the
    unconditional branch for classifier-free guidance.
    """

    data_dim: int
    hidden: tuple[int, ...]
    time_dim: int = 16
    cond_dim: int = 0
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    @property
    def layer_widths(self) -> list[int]:
        return [self.data_dim + self.time_dim + self.cond_dim, *self.hidden, self.data_dim]

    @classmethod
    def create(cls, data_dim: int, hidden=(64, 64), time_dim: int = 16, cond_dim: int = 0,
               rng: Rng | None = None, init: str = "normal") -> MlpVelocityField:
        model = cls(data_dim, tuple(hidden), time_dim, cond_dim)
        widths = model.layer_widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if init == "zeros":
                w = np.zeros((fan_in, fan_out))
            else:
                if rng is None:
                    raise ValueError("random init needs an Rng")
                w = rng.normal((fan_in, fan_out)) / np.sqrt(fan_in)
            model.weights.append(w)
            model.biases.append(np.zeros(fan_out))
        return model

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def param_names(self) -> list[str]:
        return [f"W{i}" for i in range(len(self.weights))] + [f"b{i}" for i in range(len(self.biases))]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> MlpVelocityField:
        return MlpVelocityField(self.data_dim, self.hidden, self.time_dim, self.cond_dim,
                                [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def inputs(self, x, t, cond=None) -> np.ndarray:
        x = np.atleast_2d(as_tensor(x))
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if cond is None:
            c = np.zeros((n, self.cond_dim))
        else:
            c = np.broadcast_to(np.asarray(cond, dtype=np.float64), (n, self.cond_dim))
        return np.concatenate([x, time_features(t, self.time_dim), c], axis=1)

    def __call__(self, x, t, cond=None) -> np.ndarray:
        x = as_tensor(x)
        out = mlp_forward(self, self.inputs(x, t, cond))[0]
        return out.reshape(x.shape)


def mlp_forward(model: MlpVelocityField, inputs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass on a ``(batch, in)`` input; returns the output and the per-layer activations."""
    acts = [inputs]
    h = inputs
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def mlp_backward(model: MlpVelocityField, inputs: np.ndarray,
                 target: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Flow-matching MSE and its exact gradient w.r.t. ``model.params()`` (same order)."""
    out, acts = mlp_forward(model, inputs)
    diff = out - target
    loss = float(np.mean(diff ** 2))
    g = 2.0 * diff / diff.size
    n_layers = len(model.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        grad_w[i] = acts[i].T @ g
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ model.weights[i].T) * (1.0 - acts[i] ** 2)
    return loss, grad_w + grad_b


@dataclass
class AdamState:
    """AdamW moments; weight decay is decoupled and skips bias vectors."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if p.ndim > 1 and self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    steps: int = 4000
    batch: int = 256
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    time_dim: int = 16
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    log_every: int = 50
    sigma_min: float = SIGMA_MIN
    cond_drop: float = 0.1
    lr_schedule: str = "cosine"

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if not 0.0 <= self.cond_drop <= 1.0:
            raise ValueError("cond_drop must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``; cosine decays from ``lr`` towards 0 at the last step."""
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / self.steps))


def train_flow(dataset, config: TrainConfig = TrainConfig(),
               labels=None, n_classes: int = 0) -> tuple[MlpVelocityField, list[tuple[int, float]]]:
    """Fit an :class:`MlpVelocityField` to ``dataset`` (rows are points) with flow matching.

    With ``labels`` the model is conditioned on one-hot class vectors, and a
    fraction ``config.cond_drop`` of each batch sees the zero vector instead
    so the same network also learns the unconditional field.  Returns the
    model and ``(step, batch loss)`` pairs logged every ``log_every`` steps
    and at the final step.
    """
    config.validate()
    data = as_tensor(dataset)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (points, dims) array")
    rng = Rng(config.seed)
    cond_dim = 0
    onehots = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (data.shape[0],):
            raise ValueError("labels must have one entry per data point")
        cond_dim = n_classes or int(labels.max()) + 1
        onehots = np.eye(cond_dim)[labels]
    model = MlpVelocityField.create(data.shape[1], config.hidden, config.time_dim, cond_dim,
                                    rng=rng.child(0))
    opt = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                    weight_decay=config.weight_decay)
    batch_rng = rng.child(1)
    trace = []
    for step in range(1, config.steps + 1):
        arrays = draw_training_arrays(data, config.batch, batch_rng, config.sigma_min)
        cond = None
        if onehots is not None:
            keep = batch_rng.uniform(config.batch) >= config.cond_drop
            cond = onehots[arrays.index] * keep[:, None]
        inputs = model.inputs(arrays.xt, arrays.t, cond)
        # overflow shows up as a non-finite loss, reported below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = mlp_backward(model, inputs, arrays.vt)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        opt.lr = config.lr_at(step)
        opt.update(model.params(), grads)
        if step % config.log_every == 0 or step == config.steps:
            trace.append((step, loss))
            log.debug("step %d loss %.6f", step, loss)
    return model, trace


def sample_model(model: MlpVelocityField, n: int, sched: TimeSchedule,
                 guidance: GuidanceConfig | None = None, rng: Rng | None = None,
                 cond=None, solver: str = "euler") -> np.ndarray:
    """Integrate ``n`` fresh noise draws from ``t = 0`` to ``t = 1``; rows are independent."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = rng or Rng(0)
    x0 = rng.normal((n, model.data_dim))
    if n == 0:
        return x0
    return solve(model, x0, sched, cond, guidance, solver)


def gaussian_mixture(n: int, rng: Rng, centers=((-2.0, 0.0), (2.0, 0.0)),
                     sigma: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """``n`` points from an equal-weight isotropic Gaussian mixture, with component labels."""
    centers = np.asarray(centers, dtype=np.float64)
    labels = rng.integers(centers.shape[0], n)
    points = centers[labels] + sigma * rng.normal((n, centers.shape[1]))
    return points, labels


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError("parameter data does not match its shape")
    return arr.reshape(shape)


def checkpoint_dict(model: MlpVelocityField) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "mlp_velocity_field",
        "layer_widths": model.layer_widths,
        "data_dim": model.data_dim,
        "time_dim": model.time_dim,
        "cond_dim": model.cond_dim,
        "activation": "tanh",
        "encoding": "base64-f64le",
        "params": [{"name": name, "shape": list(p.shape), "data": _encode(p)}
                   for name, p in zip(model.param_names(), model.params())],
    }


def model_from_dict(doc: dict) -> MlpVelocityField:
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    if doc.get("kind") != "mlp_velocity_field" or doc.get("encoding") != "base64-f64le":
        raise CheckpointError("not an mlp_velocity_field checkpoint")
    try:
        widths = [int(w) for w in doc["layer_widths"]]
        model = MlpVelocityField(int(doc["data_dim"]), tuple(widths[1:-1]),
                                 int(doc["time_dim"]), int(doc["cond_dim"]))
        arrays = {p["name"]: _decode(p["data"], p["shape"]) for p in doc["params"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if model.layer_widths != widths:
        raise CheckpointError("layer widths disagree with data/time/cond dims")
    n_layers = len(widths) - 1
    try:
        model.weights = [arrays[f"W{i}"] for i in range(n_layers)]
        model.biases = [arrays[f"b{i}"] for i in range(n_layers)]
    except KeyError as exc:
        raise CheckpointError(f"missing parameter {exc}") from exc
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
            raise CheckpointError(f"layer {i} has wrong parameter shapes")
    return model


def save_checkpoint(model: MlpVelocityField, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model), indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> MlpVelocityField:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    return model_from_dict(doc)
