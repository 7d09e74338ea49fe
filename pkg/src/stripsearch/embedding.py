"""Embedders and contrastive training.

The trainable model is a linear map over hashed term features followed by
L2 normalisation, so every emitted vector is unit-norm and cosine
similarity is a plain dot product. Training minimises InfoNCE where each
query competes its positive against its own hard negative and the other
positives in the batch; gradients are derived by hand and checked against
finite differences in the test suite.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np
from scipy import sparse

from .features import SparseFeatures, featurize, featurize_many
from .optim import AdamW, TrainConfig, cosine_lr

__all__ = [
    "EmbeddingVector",
    "Embedder",
    "HashingEmbedder",
    "LinearEmbedder",
    "embed",
    "cosine_sim",
    "infonce_loss",
    "infonce_sim_grads",
    "infonce_loss_and_grad",
    "Triple",
    "TrainResult",
    "train_embedder",
    "ModelFormatError",
]

log = logging.getLogger(__name__)

EMBEDDER_FORMAT = "linear-embedder"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    degenerate: bool = False

    def __post_init__(self) -> None:
        norm = float(np.linalg.norm(self.values))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding not unit-norm (|v| = {norm})")

    @property
    def dim(self) -> int:
        return len(self.values)


def cosine_sim(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return float(np.clip(a.values @ b.values, -1.0, 1.0))


class Embedder(Protocol):
    dim: int

    def embed_many(self, texts: Sequence[str]) -> np.ndarray: ...


def _normalize_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit rows, row norms, and a mask of all-zero rows (mapped to axis 0)."""
    norms = np.linalg.norm(u, axis=1)
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    e = u / safe[:, None]
    if degenerate.any():
        e[degenerate] = 0.0
        e[degenerate, 0] = 1.0
    return e, norms, degenerate


class HashingEmbedder:
    """Training-free embedder: the normalised hashed features themselves."""

    def __init__(self, feature_dim: int = 1 << 16, hash_seed: int = 0):
        self.feature_dim = feature_dim
        self.dim = feature_dim
        self.hash_seed = hash_seed

    def features(self, text: str) -> SparseFeatures:
        return featurize(text, self.feature_dim, self.hash_seed)

    def similarity(self, a: str, b: str) -> float:
        return self.features(a).dot(self.features(b))

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        x, _ = featurize_many(list(texts), self.feature_dim, self.hash_seed)
        e, _, _ = _normalize_rows(x.toarray())
        return e


@dataclass(eq=False)
class LinearEmbedder:
    weights: np.ndarray  # (dim, feature_dim)
    hash_seed: int = 0

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, feature_dim: int = 1 << 16, dim: int = 256, hash_seed: int = 0, seed: int = 0) -> LinearEmbedder:
        """Gaussian random projection, roughly preserving feature cosines."""
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((dim, feature_dim)) / math.sqrt(dim), hash_seed)

    @classmethod
    def identity(cls, feature_dim: int, hash_seed: int = 0) -> LinearEmbedder:
        return cls(np.eye(feature_dim), hash_seed)

    def features(self, texts: Sequence[str]) -> tuple[sparse.csr_matrix, np.ndarray]:
        return featurize_many(list(texts), self.feature_dim, self.hash_seed)

    def project(self, x: sparse.csr_matrix, degenerate: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray((x @ self.weights.T))
        e, _, zero = _normalize_rows(u)
        if degenerate is not None:
            zero = zero | degenerate
            e[degenerate] = 0.0
            e[degenerate, 0] = 1.0
        return e, zero

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        x, degenerate = self.features(texts)
        return self.project(x, degenerate)[0]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                format=np.array(EMBEDDER_FORMAT),
                version=np.array(FORMAT_VERSION),
                feature_dim=np.array(self.feature_dim),
                dim=np.array(self.dim),
                hash_seed=np.array(self.hash_seed),
                weights=np.ascontiguousarray(self.weights),
            )

    @classmethod
    def load(cls, path: str | Path) -> LinearEmbedder:
        data = _load_npz(path, EMBEDDER_FORMAT)
        weights = data["weights"]
        if weights.shape != (int(data["dim"]), int(data["feature_dim"])):
            raise ModelFormatError(f"{path}: weight shape {weights.shape} disagrees with header")
        return cls(weights.astype(np.float64), int(data["hash_seed"]))


def _load_npz(path: str | Path, expected_format: str) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            data = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise ModelFormatError(f"{path}: unreadable model file ({exc})") from exc
    if str(data.get("format", "")) != expected_format:
        raise ModelFormatError(f"{path}: not a {expected_format} file")
    if int(data.get("version", -1)) != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {int(data.get('version', -1))}")
    return data


def embed(model: Embedder, text: str) -> EmbeddingVector:
    """Unit-norm embedding; empty featurisation maps to axis 0, flagged."""
    if isinstance(model, LinearEmbedder):
        x, degenerate = model.features([text])
        e, zero = model.project(x, degenerate)
        return EmbeddingVector(e[0], bool(zero[0]))
    values = model.embed_many([text])[0]
    return EmbeddingVector(values, bool(values[0] == 1.0 and np.count_nonzero(values) == 1))


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def _check_finite(*arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite similarity in InfoNCE batch")


def _logits(pos_sims: np.ndarray, hard_sims: np.ndarray, tau: float) -> np.ndarray:
    pos_sims = np.atleast_2d(np.asarray(pos_sims, dtype=float))
    hard_sims = np.atleast_1d(np.asarray(hard_sims, dtype=float))
    n = pos_sims.shape[0]
    if pos_sims.shape != (n, n) or hard_sims.shape != (n,):
        raise ValueError("expected an (N, N) query-positive matrix and N hard-negative similarities")
    if not tau > 0:
        raise ValueError("temperature must be positive")
    _check_finite(pos_sims, hard_sims)
    return np.concatenate([pos_sims, hard_sims[:, None]], axis=1) / tau


def infonce_loss(pos_sims: np.ndarray, hard_sims: np.ndarray, tau: float) -> float:
    """Mean InfoNCE over N queries.

    ``pos_sims[i, j]`` is sim(q_i, p_j), so the diagonal holds each query's
    positive and the off-diagonal its in-batch negatives; ``hard_sims[i]``
    is sim(q_i, hard negative of i).
    """
    z = _logits(pos_sims, hard_sims, tau)
    zmax = z.max(axis=1, keepdims=True)
    lse = (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]
    n = z.shape[0]
    return float(np.mean(lse - z[np.arange(n), np.arange(n)]))


def infonce_sim_grads(pos_sims: np.ndarray, hard_sims: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`infonce_loss` w.r.t. both similarity arrays."""
    z = _logits(pos_sims, hard_sims, tau)
    n = z.shape[0]
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(n), np.arange(n)] -= 1.0
    p /= n * tau
    return p[:, :n], p[:, n]


def _backprop_normalize(g_e: np.ndarray, e: np.ndarray, norms: np.ndarray, zero: np.ndarray) -> np.ndarray:
    g_u = g_e - e * np.sum(e * g_e, axis=1, keepdims=True)
    g_u /= np.where(zero, 1.0, norms)[:, None]
    g_u[zero] = 0.0
    return g_u


class ColumnGrad(NamedTuple):
    cols: np.ndarray  # feature columns touched by the batch
    block: np.ndarray  # (dim, len(cols))

    def dense(self, feature_dim: int) -> np.ndarray:
        out = np.zeros((self.block.shape[0], feature_dim))
        out[:, self.cols] = self.block
        return out


def infonce_loss_and_grad(
    model: LinearEmbedder,
    xq: sparse.csr_matrix,
    xp: sparse.csr_matrix,
    xn: sparse.csr_matrix,
    tau: float,
) -> tuple[float, ColumnGrad]:
    """InfoNCE loss and its gradient w.r.t. the embedder weights.

    Inputs are feature rows for queries, positives and hard negatives.
    Rows whose projection is exactly zero are treated as constants.
    """
    x_all = sparse.vstack([xq, xp, xn]).tocsr()
    cols = np.unique(x_all.indices)
    x_sub = x_all[:, cols].toarray()
    w_sub = model.weights[:, cols]
    u = x_sub @ w_sub.T
    norms = np.linalg.norm(u, axis=1)
    zero = norms == 0.0
    e = u / np.where(zero, 1.0, norms)[:, None]
    e[zero] = 0.0
    e[zero, 0] = 1.0

    n = xq.shape[0]
    eq, ep, en = e[:n], e[n : 2 * n], e[2 * n :]
    s = eq @ ep.T
    h = np.sum(eq * en, axis=1)
    loss = infonce_loss(s, h, tau)
    ds, dh = infonce_sim_grads(s, h, tau)

    g_e = np.empty_like(e)
    g_e[:n] = ds @ ep + dh[:, None] * en
    g_e[n : 2 * n] = ds.T @ eq
    g_e[2 * n :] = dh[:, None] * eq
    g_u = _backprop_normalize(g_e, e, norms, zero)
    return loss, ColumnGrad(cols, g_u.T @ x_sub)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class Triple(NamedTuple):
    query: str
    positive: str
    hard_negative: str


@dataclass
class TrainResult:
    model: LinearEmbedder
    epoch_losses: list[float]
    lrs: list[float]


def train_embedder(
    triples: Sequence[Triple],
    cfg: TrainConfig = TrainConfig(),
    model: LinearEmbedder | None = None,
    feature_dim: int = 1 << 16,
    dim: int = 256,
    hash_seed: int = 0,
) -> TrainResult:
    """AdamW over seeded shuffled batches with cosine lr decay.

    ``epoch_losses`` holds the mean pre-step batch loss of every epoch.
    The run is a pure function of the inputs and ``cfg.seed``.
    """
    if not triples:
        raise ValueError("no training pairs")
    if model is None:
        model = LinearEmbedder.init(feature_dim, dim, hash_seed, seed=cfg.seed)
    else:
        model = LinearEmbedder(model.weights.copy(), model.hash_seed)

    xq, _ = model.features([t.query for t in triples])
    xp, _ = model.features([t.positive for t in triples])
    xn, _ = model.features([t.hard_negative for t in triples])

    n = len(triples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = AdamW(model.weights.shape, cfg)
    rng = np.random.default_rng(cfg.seed)
    epoch_losses: list[float] = []
    lrs: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            loss, grad = infonce_loss_and_grad(model, xq[idx], xp[idx], xn[idx], cfg.temperature)
            lr = cosine_lr(step, total, cfg.learning_rate, cfg.lr_min)
            opt.step(model.weights, grad.block, lr, cols=grad.cols)
            batch_losses.append(loss)
            lrs.append(lr)
            step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
        log.info("embedder epoch %d: loss %.6f", epoch + 1, epoch_losses[-1])
    return TrainResult(model, epoch_losses, lrs)
