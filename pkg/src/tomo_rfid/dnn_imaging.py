"""Deep regression imager: a fixed six-layer network mapping normalized
RSS difference vectors to normalized voxel images, trained from scratch
with inverted dropout, L2 and adaptive moment updates, and deployed as a
median-fused ensemble."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .analytic_imaging import ImageFrame
from .geometry import ImagePlane

CHECKPOINT_MAGIC = b"TSEE"
CHECKPOINT_VERSION = 1

ACTIVATION_ORDER = ("relu", "relu", "tanh", "tanh", "sigmoid", "sigmoid")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with the request."""


def layer_dims(n_inputs: int, n_outputs: int) -> list[int]:
    """Layer widths scale off the tag count; 3K/2 rounds up for odd K."""
    k = n_inputs
    return [k, math.ceil(3 * k / 2), 3 * k, 3 * k, 2 * k, 2 * k, n_outputs]


@dataclass
class MlpSpec:
    """Architecture and training hyperparameters."""

    n_inputs: int
    n_outputs: int
    dropout_retain: float = 0.7
    l2_coeff: float = 1e-6
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.dropout_retain <= 1:
            raise ValueError("dropout retain probability must be in (0, 1]")
        self.dims = layer_dims(self.n_inputs, self.n_outputs)
        self.activations = ACTIVATION_ORDER


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name}")


def _act_grad(name: str, a: np.ndarray) -> np.ndarray:
    """Derivative expressed through the activation output."""
    if name == "relu":
        return (a > 0).astype(a.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name}")


class Mlp:
    """One network: weights, biases and adaptive-moment optimizer state."""

    def __init__(self, spec: MlpSpec, seed: int | None = None):
        self.spec = spec
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(spec.dims[:-1], spec.dims[1:]):
            scale = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._adam_m = None
        self._adam_v = None
        self._adam_t = 0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def _forward_cached(self, x: np.ndarray, training: bool,
                        rng: np.random.Generator | None):
        """Returns (layer inputs, pre-dropout activations, dropout masks)."""
        layer_inputs = []
        pre_dropout = []
        masks = [None] * self.n_layers
        a = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            layer_inputs.append(a)
            a = _act(self.spec.activations[i], a @ w + b)
            pre_dropout.append(a)
            if training and i < self.n_layers - 1 and self.spec.dropout_retain < 1.0:
                if rng is None:
                    raise ValueError("training-mode forward needs an rng for dropout")
                keep = rng.random(a.shape) < self.spec.dropout_retain
                mask = keep / self.spec.dropout_retain
                a = a * mask
                masks[i] = mask
        return layer_inputs, pre_dropout, masks, a

    def forward(self, x, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Run the network; dropout only applies in training mode."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.spec.n_inputs:
            raise ValueError(
                f"input width {x.shape[1]} != expected {self.spec.n_inputs}")
        *_, out = self._forward_cached(x, training, rng)
        return out[0] if squeeze else out

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, training: bool,
                       rng: np.random.Generator | None):
        """Mean-squared-error plus L2 penalty, with analytic gradients."""
        layer_inputs, pre_dropout, masks, out = self._forward_cached(x, training, rng)
        diff = out - y
        mse = float(np.mean(diff ** 2))
        l2 = self.spec.l2_coeff * sum(float(np.sum(w ** 2)) for w in self.weights)
        loss = mse + l2

        grad_w = [None] * self.n_layers
        grad_b = [None] * self.n_layers
        d_a = 2.0 * diff / diff.size          # dL/d(post-dropout activation)
        for i in reversed(range(self.n_layers)):
            d_pre = d_a * masks[i] if masks[i] is not None else d_a
            d_z = d_pre * _act_grad(self.spec.activations[i], pre_dropout[i])
            grad_w[i] = layer_inputs[i].T @ d_z + 2.0 * self.spec.l2_coeff * self.weights[i]
            grad_b[i] = d_z.sum(axis=0)
            if i > 0:
                d_a = d_z @ self.weights[i].T
        return loss, grad_w, grad_b

    def adam_update(self, grad_w, grad_b, lr: float,
                    beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if self._adam_m is None:
            self._adam_m = [np.zeros_like(p) for p in self.weights + self.biases]
            self._adam_v = [np.zeros_like(p) for p in self.weights + self.biases]
        self._adam_t += 1
        t = self._adam_t
        params = self.weights + self.biases
        grads = grad_w + grad_b
        for j, (p, g) in enumerate(zip(params, grads)):
            m = self._adam_m[j] = beta1 * self._adam_m[j] + (1 - beta1) * g
            v = self._adam_v[j] = beta2 * self._adam_v[j] + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def train_step(net: Mlp, batch: tuple[np.ndarray, np.ndarray], spec: MlpSpec,
               rng: np.random.Generator | None = None) -> float:
    """One gradient step on a batch; returns the pre-update loss."""
    x, y = batch
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    training = spec.dropout_retain < 1.0
    loss, grad_w, grad_b = net.loss_and_grads(x, y, training=training, rng=rng)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"loss became {loss}")
    net.adam_update(grad_w, grad_b, spec.learning_rate)
    return loss


def train(net: Mlp, inputs: np.ndarray, labels: np.ndarray, spec: MlpSpec,
          rng: np.random.Generator, epochs: int | None = None) -> list[float]:
    """Shuffled mini-batch training; returns mean loss per epoch."""
    n = inputs.shape[0]
    epochs = spec.epochs if epochs is None else epochs
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, spec.batch_size):
            sel = order[lo:lo + spec.batch_size]
            losses.append(train_step(net, (inputs[sel], labels[sel]), spec, rng))
        history.append(float(np.mean(losses)))
    return history


@dataclass
class TrainingSet:
    """Paired normalized inputs and label images, both in [0, 1]."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels must pair up")
        for name, arr in (("inputs", self.inputs), ("labels", self.labels)):
            if arr.size and (arr.min() < 0 or arr.max() > 1):
                raise ValueError(f"{name} must be normalized to [0, 1]")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def normalize_input(y, max_rss: float) -> np.ndarray:
    """Scale difference values by the maximum observed difference, clipped at 1."""
    if max_rss <= 0:
        raise ValueError("max_rss must be positive")
    vals = y.values if hasattr(y, "values") else np.asarray(y, dtype=float)
    return np.minimum(vals / max_rss, 1.0)


def rasterize_label(center: tuple[float, float], semi_axes: tuple[float, float],
                    plane: ImagePlane) -> np.ndarray:
    """Filled ellipse ground-truth image (1 inside, 0 outside), grid clipped."""
    cx, cy = center
    a, b = semi_axes
    if a <= 0 or b <= 0:
        raise ValueError("semi-axes must be positive")
    W, H = plane.width_vox, plane.height_vox
    if not (0 <= cx <= W - 1 and 0 <= cy <= H - 1):
        raise ValueError(f"ellipse center ({cx}, {cy}) outside the voxel grid")
    u = np.arange(W)
    v = np.arange(H)
    uu, vv = np.meshgrid(u, v)
    inside = ((uu - cx) / a) ** 2 + ((vv - cy) / b) ** 2 <= 1.0
    return inside.astype(float).ravel()


@dataclass
class MlpEnsemble:
    """Independently seeded networks fused by an element-wise median."""

    members: list[Mlp]
    image_width: int
    image_height: int
    max_rss: float = 30.0
    k_cw: int = 6

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        dims0 = self.members[0].spec.dims
        if any(m.spec.dims != dims0 for m in self.members):
            raise ValueError("ensemble members must share layer dimensions")

    @property
    def n_members(self) -> int:
        return len(self.members)

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        """(B, N) median of the members' inference-mode outputs."""
        outs = np.stack([m.forward(x, training=False) for m in self.members])
        return np.median(outs, axis=0)


def predict(ensemble: MlpEnsemble, x, timestamp_s: float = 0.0) -> ImageFrame:
    """Median-fused single-vector prediction as an image frame."""
    x = np.asarray(x, dtype=float)
    out = ensemble.predict_batch(x[None, :])[0]
    return ImageFrame(ensemble.image_width, ensemble.image_height, out, timestamp_s)


def build_ensemble(spec: MlpSpec, n_members: int, image_width: int,
                   image_height: int, max_rss: float = 30.0,
                   k_cw: int = 6) -> MlpEnsemble:
    members = [Mlp(spec, seed=spec.seed + 1000 * i) for i in range(n_members)]
    return MlpEnsemble(members, image_width, image_height, max_rss, k_cw)


def save_checkpoint(ensemble: MlpEnsemble, path):
    """Binary ensemble checkpoint (magic TSEE, version, header, f64 arrays)."""
    spec = ensemble.members[0].spec
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack(
            "<7I", ensemble.n_members, len(spec.dims) - 1, spec.n_inputs,
            spec.n_outputs, ensemble.image_width, ensemble.image_height,
            ensemble.k_cw))
        fh.write(struct.pack("<4d", ensemble.max_rss, spec.dropout_retain,
                             spec.l2_coeff, spec.learning_rate))
        fh.write(struct.pack(f"<{len(spec.dims)}I", *spec.dims))
        for member in ensemble.members:
            for w, b in zip(member.weights, member.biases):
                fh.write(w.astype("<f8").tobytes())
                fh.write(b.astype("<f8").tobytes())


def load_checkpoint(path) -> MlpEnsemble:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError("checkpoint truncated")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<B", take(1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    d, n_layers, k, n, width, height, k_cw = struct.unpack("<7I", take(28))
    max_rss, retain, l2, lr = struct.unpack("<4d", take(32))
    dims = list(struct.unpack(f"<{n_layers + 1}I", take(4 * (n_layers + 1))))
    spec = MlpSpec(n_inputs=k, n_outputs=n, dropout_retain=retain,
                   l2_coeff=l2, learning_rate=lr)
    if dims != spec.dims:
        raise CheckpointError(
            f"checkpoint layer dims {dims} do not match the architecture "
            f"{spec.dims} for K={k}, N={n}")
    if width * height != n:
        raise CheckpointError("checkpoint image dimensions do not match output")
    members = []
    for _ in range(d):
        net = Mlp(spec)
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = np.frombuffer(take(8 * fan_in * fan_out), dtype="<f8")
            net.weights[i] = w.reshape(fan_in, fan_out).copy()
            net.biases[i] = np.frombuffer(take(8 * fan_out), dtype="<f8").copy()
        members.append(net)
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return MlpEnsemble(members, width, height, max_rss, k_cw)
