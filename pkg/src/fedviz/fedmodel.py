"""Prediction-based scheme: a shared embedding+MLP federated by parameter averaging.

Each client fits the same network on (bin index -> its own per-bin aggregate)
pairs; the coordinator averages parameters after every round. The trained
global model maps an index to (approximately) the per-client average for that
bin, which composition later scales by the number of clients.

The network is an embedding lookup followed by four fully connected layers,
ReLU on the hidden ones and identity on the single output. Labels are
normalized per client by that client's own peak value; the normalizer rides
along in the parameter vector so averaging yields a usable global output
scale without any client revealing its own (see ``label_scale``).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .features import FeatureVector


class ShapeMismatch(ValueError):
    """Parameter sets disagree on tensor shapes or round version."""


class NonFiniteLoss(RuntimeError):
    """Training loss diverged; learning rate is too high for the data."""


class IndexOutOfRange(IndexError):
    """Prediction requested for an index outside [0, M)."""


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions. The FC stack is fixed at four layers ending in width 1."""

    m: int
    embed_dim: int = 16
    hidden_dims: tuple[int, ...] = (64, 64, 32, 1)
    label_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("index space must be non-empty")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if len(self.hidden_dims) != 4:
            raise ValueError("the FC stack has exactly 4 layers")
        if self.hidden_dims[-1] != 1:
            raise ValueError("last layer width must be 1")
        if self.label_scale <= 0:
            raise ValueError("label_scale must be positive")


@dataclass
class ModelParams:
    """Embedding matrix, per-layer weights/biases, output scale, round counter."""

    embedding: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    label_scale: float = 1.0
    version: int = 0

    def tensors(self) -> list[np.ndarray]:
        out = [self.embedding]
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            embedding=self.embedding.copy(),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            label_scale=self.label_scale,
            version=self.version,
        )

    def flatten(self) -> np.ndarray:
        """All tensors raveled in declaration order, label_scale appended last."""
        parts = [t.ravel() for t in self.tensors()]
        parts.append(np.array([self.label_scale], dtype=np.float64))
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray, version: int = 0) -> "ModelParams":
        shapes = _tensor_shapes(config)
        expected = sum(int(np.prod(s)) for s in shapes) + 1
        if flat.shape != (expected,):
            raise ShapeMismatch(f"flat vector has {flat.shape[0]} elements, expected {expected}")
        offset = 0
        tensors = []
        for s in shapes:
            size = int(np.prod(s))
            tensors.append(np.asarray(flat[offset : offset + size], dtype=np.float64).reshape(s))
            offset += size
        embedding = tensors[0]
        weights = tensors[1::2]
        biases = tensors[2::2]
        return cls(embedding, weights, biases, label_scale=float(flat[-1]), version=version)

    def to_bytes(self, dtype: str = "<f4") -> bytes:
        """Shape header (JSON) + tensors in declaration order.

        Little-endian float32 by default (the on-disk persistence format);
        round broadcasts use float64 to keep training trajectories clean.
        """
        header = json.dumps(
            {
                "shapes": [list(t.shape) for t in self.tensors()],
                "label_scale": self.label_scale,
                "version": self.version,
                "dtype": dtype,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        body = b"".join(t.astype(dtype).tobytes() for t in self.tensors())
        return struct.pack("<I", len(header)) + header + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        (hlen,) = struct.unpack_from("<I", blob, 0)
        header = json.loads(blob[4 : 4 + hlen])
        shapes = [tuple(s) for s in header["shapes"]]
        dtype = np.dtype(header.get("dtype", "<f4"))
        offset = 4 + hlen
        tensors = []
        for s in shapes:
            size = int(np.prod(s)) * dtype.itemsize
            arr = np.frombuffer(blob[offset : offset + size], dtype=dtype).astype(np.float64)
            tensors.append(arr.reshape(s))
            offset += size
        if offset != len(blob):
            raise ShapeMismatch("trailing bytes in serialized parameters")
        return cls(
            embedding=tensors[0],
            weights=tensors[1::2],
            biases=tensors[2::2],
            label_scale=float(header["label_scale"]),
            version=int(header["version"]),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Federation schedule: rounds of local epochs plus SGD hyperparameters."""

    rounds: int = 30
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("invalid optimizer settings")


@dataclass(frozen=True)
class RoundReport:
    """Per-round monitor data: each client's loss plus their mean (normalized units)."""

    round: int
    client_losses: dict[int, float]
    global_loss: float

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "client_losses": {str(k): v for k, v in self.client_losses.items()},
            "global_loss": self.global_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        return cls(
            round=int(d["round"]),
            client_losses={int(k): float(v) for k, v in d["client_losses"].items()},
            global_loss=float(d["global_loss"]),
        )


def _tensor_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = [(config.m, config.embed_dim)]
    fan_in = config.embed_dim
    for width in config.hidden_dims:
        shapes.append((fan_in, width))
        shapes.append((width,))
        fan_in = width
    return shapes


def init_global(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Symmetric uniform init, a = sqrt(6 / (fan_in + fan_out)) per weight tensor."""
    rng = np.random.default_rng(seed)

    def glorot(rows: int, cols: int) -> np.ndarray:
        a = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-a, a, size=(rows, cols))

    embedding = glorot(config.m, config.embed_dim)
    weights, biases = [], []
    fan_in = config.embed_dim
    for width in config.hidden_dims:
        weights.append(glorot(fan_in, width))
        biases.append(np.zeros(width))
        fan_in = width
    return ModelParams(embedding, weights, biases, label_scale=config.label_scale, version=0)


def _forward_batch(params: ModelParams, idx: np.ndarray) -> tuple[np.ndarray, list, list]:
    """Normalized outputs for a batch of indices, keeping activations for backprop."""
    h = params.embedding[idx]
    pre, post = [], [h]
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if l == last else np.maximum(z, 0.0)
        post.append(h)
    return h[:, 0], pre, post


def forward(params: ModelParams, index: int) -> float:
    """Predicted per-bin value for one index, in label units."""
    if not 0 <= index < params.embedding.shape[0]:
        raise IndexOutOfRange(f"index {index} outside [0, {params.embedding.shape[0]})")
    out, _, _ = _forward_batch(params, np.array([index]))
    return float(out[0] * params.label_scale)


def predict_all(params: ModelParams, m: int, spec_id: str = "") -> FeatureVector:
    """Feed every index through the model; output is the per-client average per bin."""
    out, _, _ = _forward_batch(params, np.arange(m))
    return FeatureVector(spec_id, out * params.label_scale)


def loss_and_gradients(
    params: ModelParams, idx: np.ndarray, targets: np.ndarray
) -> tuple[float, "ModelParams"]:
    """Batch squared-error loss (normalized units) and its analytic gradients.

    Gradients come back packed in a ModelParams of the same shapes
    (label_scale slot unused, set to 1).
    """
    out, pre, post = _forward_batch(params, idx)
    err = out - targets
    loss = float(np.mean(err**2))

    n_layers = len(params.weights)
    d_h = (2.0 * err / len(idx))[:, None]
    g_w = [np.empty(0)] * n_layers
    g_b = [np.empty(0)] * n_layers
    for l in range(n_layers - 1, -1, -1):
        d_z = d_h if l == n_layers - 1 else d_h * (pre[l] > 0)
        g_w[l] = post[l].T @ d_z
        g_b[l] = d_z.sum(axis=0)
        d_h = d_z @ params.weights[l].T
    g_embed = np.zeros_like(params.embedding)
    np.add.at(g_embed, idx, d_h)
    return loss, ModelParams(g_embed, g_w, g_b, label_scale=1.0, version=params.version)


def client_label_scale(values: np.ndarray) -> float:
    """A client's own peak magnitude (1 if all zero): its vote in the scale consensus.

    Clients cannot broadcast raw scales without leaking, so the shared
    normalizer is the mean of these votes, computed through the same masked
    secure sum as everything else. Only the mean ever becomes visible, and the
    mean is already derivable from the finished chart.
    """
    peak = float(np.max(np.abs(values))) if len(values) else 0.0
    return peak if peak > 0 else 1.0


def local_train(
    params: ModelParams,
    data: FeatureVector,
    cfg: TrainConfig,
    present: Optional[np.ndarray] = None,
) -> tuple[ModelParams, float]:
    """Mini-batch SGD for ``cfg.epochs`` epochs on (index, value/label_scale) pairs.

    ``present`` marks which bins this client actually holds; absent bins are
    excluded from the training pairs. Returns the updated parameters and the
    epoch-final mean squared error in label units.
    """
    m = params.embedding.shape[0]
    if len(data) != m:
        raise ShapeMismatch(f"feature length {len(data)} != model index space {m}")
    train_idx = np.arange(m) if present is None else np.flatnonzero(present)
    if len(train_idx) == 0:
        return params.copy(), 0.0
    scale = params.label_scale
    targets = data.values[train_idx] / scale

    p = params.copy()
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss, g = loss_and_gradients(p, train_idx[sel], targets[sel])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss diverged to {loss}; lower the learning rate")
            p.embedding -= cfg.lr * g.embedding
            for w, gw in zip(p.weights, g.weights):
                w -= cfg.lr * gw
            for b, gb in zip(p.biases, g.biases):
                b -= cfg.lr * gb

    out, _, _ = _forward_batch(p, train_idx)
    final = float(np.mean((out - targets) ** 2)) * scale**2
    if not np.isfinite(final):
        raise NonFiniteLoss("loss diverged; lower the learning rate")
    return p, final


def fed_average(uploads: Sequence[ModelParams]) -> ModelParams:
    """Elementwise unweighted mean of every tensor (and the output scale)."""
    if not uploads:
        raise ShapeMismatch("nothing to average")
    first = uploads[0]
    for other in uploads[1:]:
        if other.version != first.version:
            raise ShapeMismatch("uploads come from different rounds")
        if len(other.weights) != len(first.weights):
            raise ShapeMismatch("uploads disagree on layer count")
        for a, b in zip(other.tensors(), first.tensors()):
            if a.shape != b.shape:
                raise ShapeMismatch(f"tensor shapes differ: {a.shape} vs {b.shape}")
    n = len(uploads)
    return ModelParams(
        embedding=sum(u.embedding for u in uploads) / n,
        weights=[sum(u.weights[l] for u in uploads) / n for l in range(len(first.weights))],
        biases=[sum(u.biases[l] for u in uploads) / n for l in range(len(first.biases))],
        label_scale=sum(u.label_scale for u in uploads) / n,
        version=first.version + 1,
    )


def round_seed(base_seed: int, *parts: int) -> int:
    """Stable derived seed so runs are reproducible end to end.

    Training rounds use (base, round) only: clients with identical data and
    seeds then produce identical updates, so their average is the N=1 result.
    """
    return int(np.random.SeedSequence([base_seed, *parts]).generate_state(1)[0])


def run_federated_training(
    clients: Sequence[FeatureVector],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    present: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> tuple[ModelParams, list[RoundReport]]:
    """Simulate the whole loop: broadcast, local training, average, repeat.

    Stops after ``tcfg.rounds`` rounds or once the global normalized loss
    moves by less than ``tcfg.tol`` between consecutive rounds.
    """
    if not clients:
        raise ValueError("at least one client required")
    for v in clients:
        if len(v) != mcfg.m:
            raise ShapeMismatch(f"client vector length {len(v)} != M {mcfg.m}")
    masks = list(present) if present is not None else [None] * len(clients)

    global_params = init_global(mcfg, tcfg.seed)
    # scale consensus: the live protocol secure-sums these votes, here we average
    scale = float(np.mean([client_label_scale(v.values) for v in clients]))
    global_params.label_scale = scale
    reports: list[RoundReport] = []
    prev_loss: Optional[float] = None
    for t in range(1, tcfg.rounds + 1):
        uploads, losses = [], {}
        cfg_t = dataclasses.replace(tcfg, seed=round_seed(tcfg.seed, t))
        for i, v in enumerate(clients):
            local = global_params.copy()
            trained, label_loss = local_train(local, v, cfg_t, present=masks[i])
            uploads.append(trained)
            losses[i] = label_loss / scale**2
        global_params = fed_average(uploads)
        global_loss = float(np.mean(list(losses.values())))
        reports.append(RoundReport(t, losses, global_loss))
        if prev_loss is not None and abs(global_loss - prev_loss) < tcfg.tol:
            break
        prev_loss = global_loss
    return global_params, reports
