"""
Semantic view-score regressor.

A two-stage multilayer perceptron in numpy:

    embedding -> [FC + BN + ReLU, Dropout] x (n-1) -> FC + BN + ReLU
    concat(angle features)
    -> [FC + BN + ReLU, Dropout] x (m-1) -> FC + BN + ReLU
    -> FC(1) + BN + Sigmoid

The embedding is the feature vector of the pose's top view; the angles are
the candidate view's (theta, phi). Trained with Adam on mean squared error.
"""

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from viewselect.dataset import DatasetModel, _atomic_write
from viewselect.scoring import ScoreTable
from utils.errors import (
    ChecksumError,
    DataError,
    DimensionMismatchError,
    MalformedHeaderError,
    NonFiniteActivationError,
    TrainingDivergedError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from utils.logger import get_logger

logger = get_logger(__name__)

MODEL_MAGIC = b"SVSM"
MODEL_VERSION = 1

ANGLE_ENCODINGS = ("raw", "sincos")
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# magic, version, embed_dim, n_mlp1, n_mlp2, dropout, angle encoding, digest
_HEADER = struct.Struct("<4sIIIIdB32s")
_CRC = struct.Struct("<I")


@dataclass
class RegressorConfig:
    """Architecture and optimization settings"""
    embed_dim: Optional[int] = None
    mlp1_widths: List[int] = field(default_factory=lambda: [256, 256])
    mlp2_widths: List[int] = field(default_factory=lambda: [64, 64, 64])
    dropout: float = 0.25
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    angle_encoding: str = "raw"
    seed: int = 0
    log_every: int = 10

    def violations(self) -> List[str]:
        problems = []
        if self.embed_dim is not None and self.embed_dim < 1:
            problems.append("regressor.embed_dim: must be >= 1")
        if not self.mlp1_widths or any(w < 1 for w in self.mlp1_widths):
            problems.append("regressor.mlp1_widths: needs at least one width, all > 0")
        if not self.mlp2_widths or any(w < 1 for w in self.mlp2_widths):
            problems.append("regressor.mlp2_widths: needs at least one width, all > 0")
        if not 0 <= self.dropout < 1:
            problems.append("regressor.dropout: must lie in [0, 1)")
        if self.learning_rate < 0:
            problems.append("regressor.learning_rate: must be >= 0")
        if self.batch_size < 2:
            problems.append("regressor.batch_size: must be >= 2 for batch normalization")
        if self.epochs < 1:
            problems.append("regressor.epochs: must be >= 1")
        if self.angle_encoding not in ANGLE_ENCODINGS:
            problems.append(f"regressor.angle_encoding: must be one of {ANGLE_ENCODINGS}, got '{self.angle_encoding}'")
        if self.log_every < 1:
            problems.append("regressor.log_every: must be >= 1")
        return problems

    def validate(self) -> 'RegressorConfig':
        problems = self.violations()
        if problems:
            raise ValidationError("Invalid regressor configuration", violations=problems)
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RegressorConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(
                "Unknown regressor configuration keys",
                violations=[f"regressor.{key}: unknown key" for key in sorted(unknown)]
            )
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainingExample:
    """Top-view embedding of a pose, candidate view angles and its scaled score"""
    top_embedding: np.ndarray
    theta: float
    phi: float
    target: float


@dataclass
class Block:
    """FC + BN + activation, optionally followed by dropout"""
    name: str
    activation: str
    dropout_after: bool


class RegressorState:
    """
    Parameters, batch-norm buffers and the training flag.

    ``params`` and ``buffers`` are ordered; their order is the on-disk order.
    """

    def __init__(self, embed_dim: int, mlp1_widths: Sequence[int], mlp2_widths: Sequence[int],
                 dropout: float, angle_encoding: str):
        self.embed_dim = int(embed_dim)
        self.mlp1_widths = [int(w) for w in mlp1_widths]
        self.mlp2_widths = [int(w) for w in mlp2_widths]
        self.dropout = float(dropout)
        self.angle_encoding = angle_encoding
        self.training = False
        self.config_digest: Optional[str] = None
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

        self.mlp1 = [Block(f"mlp1.{i}", "relu", i < len(self.mlp1_widths) - 1)
                     for i in range(len(self.mlp1_widths))]
        self.mlp2 = [Block(f"mlp2.{i}", "relu", i < len(self.mlp2_widths) - 1)
                     for i in range(len(self.mlp2_widths))]
        self.head = Block("head", "sigmoid", False)

        fan_in = self.embed_dim
        for block, width in zip(self.mlp1, self.mlp1_widths):
            self._allocate(block.name, fan_in, width)
            fan_in = width
        fan_in += angle_dim(angle_encoding)
        for block, width in zip(self.mlp2, self.mlp2_widths):
            self._allocate(block.name, fan_in, width)
            fan_in = width
        self._allocate(self.head.name, fan_in, 1)

    def _allocate(self, name: str, fan_in: int, width: int):
        self.params[f"{name}.W"] = np.zeros((fan_in, width))
        self.params[f"{name}.b"] = np.zeros(width)
        self.params[f"{name}.gamma"] = np.ones(width)
        self.params[f"{name}.beta"] = np.zeros(width)
        self.buffers[f"{name}.running_mean"] = np.zeros(width)
        self.buffers[f"{name}.running_var"] = np.ones(width)

    def initialize(self, rng: np.random.Generator) -> 'RegressorState':
        """Fan-in scaled uniform weights; biases and BN shifts zero, BN scales one"""
        for name, value in self.params.items():
            if name.endswith(".W"):
                bound = 1.0 / np.sqrt(value.shape[0])
                self.params[name] = rng.uniform(-bound, bound, size=value.shape)
        return self

    @property
    def blocks(self) -> List[Block]:
        return self.mlp1 + self.mlp2 + [self.head]

    def copy(self) -> 'RegressorState':
        clone = RegressorState(self.embed_dim, self.mlp1_widths, self.mlp2_widths,
                               self.dropout, self.angle_encoding)
        clone.params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        clone.buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        clone.training = self.training
        clone.config_digest = self.config_digest
        return clone

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class TrainingResult:
    state: RegressorState
    loss_history: List[float]


def angle_dim(encoding: str) -> int:
    return 4 if encoding == "sincos" else 2


def encode_angles(theta, phi, encoding: str) -> np.ndarray:
    """
    Angle features, one row per view.

    raw: (theta mod 360) / 360 and phi / 90. sincos: sin/cos of both angles,
    theta reduced mod 360 first so theta and theta + 360 encode identically.
    """
    theta = np.mod(np.atleast_1d(np.asarray(theta, dtype=np.float64)), 360.0)
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    if encoding == "sincos":
        t, p = np.radians(theta), np.radians(phi)
        return np.column_stack([np.sin(t), np.cos(t), np.sin(p), np.cos(p)])
    return np.column_stack([theta / 360.0, phi / 90.0])


def _as_batch(state: RegressorState, embedding, theta, phi) -> Tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(embedding, dtype=np.float64))
    if X.shape[1] != state.embed_dim:
        raise DimensionMismatchError(
            "Embedding dimension does not match the regressor",
            context={"expected": state.embed_dim, "actual": X.shape[1]}
        )
    A = encode_angles(theta, phi, state.angle_encoding)
    if A.shape[0] == 1 and X.shape[0] > 1:
        A = np.repeat(A, X.shape[0], axis=0)
    if X.shape[0] == 1 and A.shape[0] > 1:
        X = np.repeat(X, A.shape[0], axis=0)
    if A.shape[0] != X.shape[0]:
        raise DimensionMismatchError("Angle and embedding batch sizes differ",
                                     context={"embeddings": X.shape[0], "angles": A.shape[0]})
    return X, A


def _block_forward(state: RegressorState, block: Block, x: np.ndarray, mode: str,
                   rng: Optional[np.random.Generator], update_stats: bool):
    """
    mode: 'train' (batch stats, dropout), 'batch' (batch stats, no dropout),
    'eval' (running stats, no dropout)
    """
    p = state.params
    W, b = p[f"{block.name}.W"], p[f"{block.name}.b"]
    gamma, beta = p[f"{block.name}.gamma"], p[f"{block.name}.beta"]
    z = x @ W + b

    if mode == "eval":
        mean = state.buffers[f"{block.name}.running_mean"]
        var = state.buffers[f"{block.name}.running_var"]
    else:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
        if update_stats:
            rm = state.buffers[f"{block.name}.running_mean"]
            rv = state.buffers[f"{block.name}.running_var"]
            state.buffers[f"{block.name}.running_mean"] = BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mean
            state.buffers[f"{block.name}.running_var"] = BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean) * inv_std
    y = gamma * xhat + beta

    if block.activation == "relu":
        out = np.maximum(y, 0.0)
    else:
        out = 1.0 / (1.0 + np.exp(-y))

    mask = None
    if mode == "train" and block.dropout_after and state.dropout > 0:
        mask = (rng.random(out.shape) >= state.dropout) / (1.0 - state.dropout)
        out = out * mask

    return out, (x, xhat, inv_std, y, out, mask, mode)


def _block_backward(state: RegressorState, block: Block, dout: np.ndarray, cache, grads: Dict[str, np.ndarray]):
    x, xhat, inv_std, y, out, mask, mode = cache
    gamma = state.params[f"{block.name}.gamma"]
    if mask is not None:
        dout = dout * mask

    if block.activation == "relu":
        dy = dout * (y > 0)
    else:
        dy = dout * out * (1.0 - out)

    grads[f"{block.name}.beta"] = dy.sum(axis=0)
    grads[f"{block.name}.gamma"] = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    if mode == "eval":
        dz = dxhat * inv_std
    else:
        n = dy.shape[0]
        dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))

    grads[f"{block.name}.W"] = x.T @ dz
    grads[f"{block.name}.b"] = dz.sum(axis=0)
    return dz @ state.params[f"{block.name}.W"].T


def _forward(state: RegressorState, X: np.ndarray, A: np.ndarray, mode: str,
             rng: Optional[np.random.Generator] = None, update_stats: bool = False):
    caches = []
    h = X
    for block in state.mlp1:
        h, cache = _block_forward(state, block, h, mode, rng, update_stats)
        caches.append(cache)
    h = np.concatenate([h, A], axis=1)
    for block in state.mlp2 + [state.head]:
        h, cache = _block_forward(state, block, h, mode, rng, update_stats)
        caches.append(cache)
    scores = h[:, 0]
    if not np.all(np.isfinite(scores)):
        raise NonFiniteActivationError("Regressor produced non-finite scores", context={"batch": X.shape[0]})
    return scores, caches


def _backward(state: RegressorState, dscores: np.ndarray, caches) -> Dict[str, np.ndarray]:
    grads: Dict[str, np.ndarray] = {}
    dh = dscores[:, None]
    tail = state.mlp2 + [state.head]
    for block, cache in zip(reversed(tail), reversed(caches[len(state.mlp1):])):
        dh = _block_backward(state, block, dh, cache, grads)
    dh = dh[:, :state.mlp1_widths[-1]]
    for block, cache in zip(reversed(state.mlp1), reversed(caches[:len(state.mlp1)])):
        dh = _block_backward(state, block, dh, cache, grads)
    return grads


def _mse(scores: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    diff = scores - targets
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.shape[0]


def forward(state: RegressorState, embedding, theta, phi, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Predicted scores in (0, 1)

    Args:
        state: Regressor
        embedding: (d,) or (n, d) top-view embeddings
        theta, phi: Candidate angles in degrees (scalars or length-n)
        mode: 'eval' (running BN stats, no dropout) or 'train'
        rng: Dropout generator for train mode

    Raises:
        DimensionMismatchError: On embedding or batch size mismatch
        NonFiniteActivationError: If the output is not finite
    """
    if mode not in ("eval", "train"):
        raise ValidationError("mode must be 'eval' or 'train'", context={"mode": mode})
    X, A = _as_batch(state, embedding, theta, phi)
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        scores, _ = _forward(state, X, A, "train", rng, update_stats=True)
    else:
        scores, _ = _forward(state, X, A, "eval")
    return scores


def predict(state: RegressorState, embeddings: np.ndarray, thetas, phis) -> np.ndarray:
    """Batch eval-mode scores"""
    return forward(state, embeddings, thetas, phis, mode="eval")


def _stack(examples: Sequence[TrainingExample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    X = np.stack([np.asarray(e.top_embedding, dtype=np.float64) for e in examples])
    thetas = np.asarray([e.theta for e in examples], dtype=np.float64)
    phis = np.asarray([e.phi for e in examples], dtype=np.float64)
    y = np.asarray([e.target for e in examples], dtype=np.float64)
    return X, thetas, phis, y


def evaluate_loss(state: RegressorState, examples: Sequence[TrainingExample]) -> float:
    """Eval-mode mean squared error"""
    X, thetas, phis, y = _stack(examples)
    return _mse(predict(state, X, thetas, phis), y)[0]


def train(examples: Sequence[TrainingExample], cfg: RegressorConfig) -> TrainingResult:
    """
    Fit the regressor with Adam on mean squared error.

    Each epoch shuffles the examples and splits them into floor(n / batch_size)
    nearly equal mini-batches (at least one), so every batch holds at least
    two examples.

    Args:
        examples: Training examples (targets in [0, 1])
        cfg: Regressor configuration

    Returns:
        TrainingResult with the trained state (eval mode) and per-epoch mean train loss

    Raises:
        ValidationError: Empty dataset, fewer than 2 examples or targets outside [0, 1]
        DimensionMismatchError: If embeddings do not match cfg.embed_dim
        TrainingDivergedError: If the loss becomes non-finite
    """
    cfg.validate()
    if len(examples) < 2:
        raise ValidationError("Training needs at least two examples", context={"examples": len(examples)})
    X, thetas, phis, y = _stack(examples)
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise ValidationError("Training targets must lie in [0, 1]")
    embed_dim = cfg.embed_dim or X.shape[1]
    if X.shape[1] != embed_dim:
        raise DimensionMismatchError("Embedding dimension does not match configuration",
                                     context={"expected": embed_dim, "actual": X.shape[1]})

    rng = np.random.default_rng(cfg.seed)
    state = RegressorState(embed_dim, cfg.mlp1_widths, cfg.mlp2_widths, cfg.dropout, cfg.angle_encoding)
    state.initialize(rng)
    state.training = True
    A = encode_angles(thetas, phis, cfg.angle_encoding)

    m = {k: np.zeros_like(v) for k, v in state.params.items()}
    v = {k: np.zeros_like(val) for k, val in state.params.items()}
    step = 0
    n = X.shape[0]
    n_batches = max(1, n // cfg.batch_size)
    history: List[float] = []

    logger.stage_start("train_regressor", examples=n, embed_dim=embed_dim,
                       parameters=state.n_parameters(), epochs=cfg.epochs, batches=n_batches)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in np.array_split(rng.permutation(n), n_batches):
            scores, caches = _forward(state, X[batch], A[batch], "train", rng, update_stats=True)
            loss, dscores = _mse(scores, y[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            grads = _backward(state, dscores, caches)
            step += 1
            for name, g in grads.items():
                m[name] = ADAM_BETA1 * m[name] + (1 - ADAM_BETA1) * g
                v[name] = ADAM_BETA2 * v[name] + (1 - ADAM_BETA2) * g ** 2
                m_hat = m[name] / (1 - ADAM_BETA1 ** step)
                v_hat = v[name] / (1 - ADAM_BETA2 ** step)
                state.params[name] = state.params[name] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            losses.append(loss * len(batch))
        epoch_loss = float(sum(losses) / n)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        history.append(epoch_loss)
        logger.epoch_progress(epoch, cfg.epochs, epoch_loss, cfg.log_every)

    state.training = False
    return TrainingResult(state=state, loss_history=history)


def gradient_check(state: RegressorState, examples: Sequence[TrainingExample],
                   epsilon: float = 1e-5, bn_mode: str = "eval") -> float:
    """
    Compare analytic MSE gradients against central finite differences.

    Dropout is off. bn_mode 'eval' normalizes with running statistics;
    'batch' uses the statistics of the given examples (needs two or more)
    without touching the running buffers.

    Returns:
        Max over all parameter entries of |a - n| / max(|a| + |n|, 1e-5)
    """
    if bn_mode not in ("eval", "batch"):
        raise ValidationError("bn_mode must be 'eval' or 'batch'", context={"bn_mode": bn_mode})
    if bn_mode == "batch" and len(examples) < 2:
        raise ValidationError("Batch-mode gradient check needs at least two examples")
    X, thetas, phis, y = _stack(examples)
    X, A = _as_batch(state, X, thetas, phis)
    trial = state.copy()

    def loss_of() -> float:
        scores, _ = _forward(trial, X, A, bn_mode)
        return _mse(scores, y)[0]

    scores, caches = _forward(trial, X, A, bn_mode)
    analytic = _backward(trial, _mse(scores, y)[1], caches)

    worst = 0.0
    for name, param in trial.params.items():
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = param[idx]
            param[idx] = original + epsilon
            plus = loss_of()
            param[idx] = original - epsilon
            minus = loss_of()
            param[idx] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            a = analytic[name][idx]
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-5))
    return worst


def build_training_examples(model: DatasetModel, scores: ScoreTable) -> List[TrainingExample]:
    """
    Pair every scored view with its pose's top-view embedding and its scaled score

    Raises:
        ValidationError: If the scores were never rescaled per pose
    """
    examples = []
    for row, vid in enumerate(scores.view_ids):
        target = scores.scaled[row]
        if not np.isfinite(target):
            raise ValidationError("Score table has no per-pose scaled scores", context={"view": str(vid)})
        record = model.records[model.index_of(vid)]
        top = model.records[model.top_view_index(vid.pose_key)]
        examples.append(TrainingExample(top.features, record.theta, record.phi, float(target)))
    return examples


def save_model(state: RegressorState, path: Path, config_digest: Optional[str] = None):
    """Write the model file with a trailing CRC32"""
    path = Path(path)
    digest = config_digest or state.config_digest
    header = _HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, state.embed_dim, len(state.mlp1_widths), len(state.mlp2_widths),
        state.dropout, ANGLE_ENCODINGS.index(state.angle_encoding),
        bytes.fromhex(digest) if digest else bytes(32),
    )
    widths = struct.pack(f"<{len(state.mlp1_widths) + len(state.mlp2_widths)}I",
                         *state.mlp1_widths, *state.mlp2_widths)
    tensors = b"".join(
        np.ascontiguousarray(t, dtype="<f8").tobytes()
        for t in list(state.params.values()) + list(state.buffers.values())
    )
    payload = header + widths + tensors
    _atomic_write(path, payload + _CRC.pack(zlib.crc32(payload)))
    logger.info(f"Saved model to {path}", parameters=state.n_parameters())


def load_model(path: Path, expected_embed_dim: Optional[int] = None) -> RegressorState:
    """
    Read a model file

    Raises:
        MalformedHeaderError, VersionMismatchError, TruncatedFileError,
        ChecksumError, DimensionMismatchError
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read model file {path}", context={"error": str(e)})
    if len(data) < _HEADER.size + _CRC.size:
        raise TruncatedFileError("Model file header is incomplete", context={"file": str(path)})
    magic, version, embed_dim, n1, n2, dropout, encoding, digest = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise MalformedHeaderError("Not a model file (bad magic)", context={"file": str(path)})
    if version != MODEL_VERSION:
        raise VersionMismatchError("Unsupported model file version",
                                   context={"file": str(path), "version": version, "supported": MODEL_VERSION})
    payload, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("Model file checksum mismatch", context={"file": str(path)})
    if expected_embed_dim is not None and embed_dim != expected_embed_dim:
        raise DimensionMismatchError("Model embedding dimension does not match the features",
                                     context={"file": str(path), "model": embed_dim, "features": expected_embed_dim})
    if encoding >= len(ANGLE_ENCODINGS):
        raise MalformedHeaderError("Unknown angle encoding", context={"file": str(path), "encoding": encoding})

    offset = _HEADER.size
    widths = struct.unpack_from(f"<{n1 + n2}I", payload, offset)
    offset += 4 * (n1 + n2)
    state = RegressorState(embed_dim, widths[:n1], widths[n1:], dropout, ANGLE_ENCODINGS[encoding])
    for store in (state.params, state.buffers):
        for name, template in store.items():
            nbytes = template.size * 8
            if offset + nbytes > len(payload):
                raise TruncatedFileError("Model file is truncated", context={"file": str(path), "tensor": name})
            store[name] = np.frombuffer(payload, dtype="<f8", count=template.size, offset=offset) \
                .reshape(template.shape).astype(np.float64)
            offset += nbytes
    if offset != len(payload):
        raise DataError("Model file has trailing bytes", context={"file": str(path)})
    state.config_digest = None if digest == bytes(32) else digest.hex()
    return state
