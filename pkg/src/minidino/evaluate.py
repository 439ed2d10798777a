"""Frozen-backbone evaluation: embedding extraction, KNN, linear probes.

Embeddings come from the backbone only (the projection head is dropped for
downstream use). KNN uses cosine similarity over L2-normalized rows with
either uniform majority voting or temperature-softmax weighting; the linear
probe trains a single linear layer on raw embeddings for a fixed number of
epochs over a stratified fraction of the training set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .augment import canonical_view
from .config import RunConfig
from .data import ImageRecord
from .schedules import cosine_interp
from .serial import Checkpoint, load_container, load_checkpoint, save_container


class EvalError(Exception):
    pass


@dataclass
class EmbeddingSet:
    matrix: np.ndarray  # (N, D) float32
    labels: np.ndarray  # (N,) int64; -1 where unlabeled
    ids: list[str]
    l2_normalized: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.matrix.shape[0]
        if self.labels.shape[0] != n or len(self.ids) != n:
            raise EvalError(
                f"row count mismatch: matrix {n}, labels {self.labels.shape[0]}, ids {len(self.ids)}"
            )
        if self.l2_normalized and n:
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.abs(norms - 1.0).max() > 1e-5:
                raise EvalError("l2_normalized set but row norms deviate from 1")

    def __len__(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class KNNConfig:
    k: int = 20
    metric: str = "cosine"
    weighting: str = "temperature-softmax"  # uniform | temperature-softmax
    vote_temp: float = 0.07


@dataclass(frozen=True)
class LinearProbeConfig:
    epochs: int = 30
    data_fraction: float = 1.0
    lr: float = 0.01
    batch_size: int = 64
    stratified: bool = True
    momentum: float = 0.9
    seed: int = 0


# Extraction -----------------------------------------------------------------


def extract_embeddings(
    checkpoint: str | Checkpoint,
    records: list[ImageRecord],
    which: str = "teacher",
    l2_normalize: bool = True,
    batch_size: int | None = None,
) -> EmbeddingSet:
    """Backbone outputs on the canonical (resize + center crop) view."""
    from .dino import model_from_checkpoint  # deferred: dino imports serial

    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, str) else checkpoint
    model, cfg = model_from_checkpoint(ckpt, which=which)
    if batch_size is None:
        batch_size = max(1, cfg.batch_size_eval)
    size = cfg.augment.global_size
    rows = []
    with ag.no_grad():
        tensors = model.params.tensors()
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            x = np.stack([canonical_view(r.pixels, size) for r in chunk])
            rows.append(model.embed(tensors, x).data)
    matrix = np.concatenate(rows, axis=0) if rows else np.zeros((0, model.embed_dim), np.float32)
    if matrix.shape[1] != model.embed_dim:
        raise EvalError(
            f"embedding dim {matrix.shape[1]} does not match checkpoint header {model.embed_dim}"
        )
    if l2_normalize and len(matrix):
        matrix = matrix / np.maximum(np.linalg.norm(matrix, axis=1, keepdims=True), 1e-12)
    labels = np.array([r.label if r.label is not None else -1 for r in records], dtype=np.int64)
    return EmbeddingSet(matrix=matrix, labels=labels, ids=[r.id for r in records], l2_normalized=l2_normalize)


# KNN ---------------------------------------------------------------------


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    return matrix / np.maximum(np.linalg.norm(matrix, axis=1, keepdims=True), 1e-12)


def _vote(sims: np.ndarray, labels: np.ndarray, cfg: KNNConfig) -> int:
    """Pick a label from the k neighbors' similarities and labels."""
    n_classes = int(labels.max()) + 1
    if cfg.weighting == "uniform":
        counts = np.bincount(labels, minlength=n_classes)
        best = np.flatnonzero(counts == counts.max())
        if len(best) == 1:
            return int(best[0])
        sums = np.bincount(labels, weights=sims, minlength=n_classes)[best]
        # Summed similarity breaks count ties; remaining ties go to the
        # smallest label (flatnonzero is ascending, argmax takes the first).
        return int(best[int(np.argmax(sums))])
    scores = np.bincount(labels, weights=np.exp(sims / cfg.vote_temp), minlength=n_classes)
    return int(np.argmax(scores))


def knn_predict(
    train: EmbeddingSet,
    queries: np.ndarray,
    cfg: KNNConfig,
    query_ids: list[str] | None = None,
) -> np.ndarray:
    """Predicted labels for query rows (cosine top-k over the train set)."""
    n = len(train)
    if n == 0:
        raise EvalError("knn: empty training set")
    if cfg.k > n:
        raise EvalError(f"knn: k={cfg.k} exceeds training set size {n}")
    if train.labels.min() < 0:
        raise EvalError("knn: training set has unlabeled rows")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    train_m = train.matrix if train.l2_normalized else _unit_rows(train.matrix)
    q = _unit_rows(queries)
    sims = q @ train_m.T  # (Nq, Nt)
    if query_ids is not None:
        id_index: dict[str, list[int]] = {}
        for j, tid in enumerate(train.ids):
            id_index.setdefault(tid, []).append(j)
        for i, qid in enumerate(query_ids):
            for j in id_index.get(qid, ()):  # self-match exclusion
                sims[i, j] = -np.inf
    # Stable full ordering: descending similarity, index breaks exact ties.
    order = np.argsort(-sims, axis=1, kind="stable")[:, : cfg.k]
    preds = np.empty(len(q), dtype=np.int64)
    for i in range(len(q)):
        idx = order[i]
        preds[i] = _vote(sims[i, idx], train.labels[idx], cfg)
    return preds


def knn_classify(train: EmbeddingSet, query: np.ndarray, cfg: KNNConfig) -> int:
    """Label for a single query row."""
    return int(knn_predict(train, query[None, :], cfg)[0])


@dataclass
class KNNReport:
    accuracy: float
    per_class: dict[int, float] = field(default_factory=dict)


def knn_accuracy(train: EmbeddingSet, test: EmbeddingSet, cfg: KNNConfig) -> KNNReport:
    """Exact-match accuracy plus per-class accuracies."""
    train_classes = set(np.unique(train.labels).tolist())
    test_classes = set(np.unique(test.labels).tolist())
    if train_classes.isdisjoint(test_classes):
        warnings.warn("knn_accuracy: train and test label sets are disjoint")
    preds = knn_predict(train, test.matrix, cfg, query_ids=test.ids)
    correct = preds == test.labels
    per_class = {}
    for c in sorted(test_classes):
        m = test.labels == c
        per_class[int(c)] = float(correct[m].mean())
    return KNNReport(accuracy=float(correct.mean()), per_class=per_class)


# Subsampling -----------------------------------------------------------------


def subsample_fraction(es: EmbeddingSet, fraction: float, seed: int) -> EmbeddingSet:
    """Stratified per-class subsample: round(fraction * class count), min 1."""
    if not 0 < fraction <= 1:
        raise EvalError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng([seed, 0x5A3])
    keep: list[np.ndarray] = []
    for c in sorted(np.unique(es.labels).tolist()):
        idx = np.flatnonzero(es.labels == c)
        if len(idx) == 0:
            raise EvalError(f"subsample: class {c} is empty")
        count = max(1, int(round(fraction * len(idx))))
        keep.append(rng.permutation(idx)[:count])
    sel = np.concatenate(keep)
    return EmbeddingSet(
        matrix=es.matrix[sel],
        labels=es.labels[sel],
        ids=[es.ids[i] for i in sel],
        l2_normalized=es.l2_normalized,
    )


# Linear probe ----------------------------------------------------------------


def linear_probe(train: EmbeddingSet, test: EmbeddingSet, cfg: LinearProbeConfig) -> float:
    """Train a single linear layer on frozen embeddings; report test accuracy."""
    n_classes = int(train.labels.max()) + 1
    sub = subsample_fraction(train, cfg.data_fraction, cfg.seed) if cfg.data_fraction < 1 else train
    if cfg.stratified:
        present = set(np.unique(sub.labels).tolist())
        missing = [c for c in range(n_classes) if c not in present]
        if missing:
            raise EvalError(f"stratified probe subsample lost classes {missing}")
    x = sub.matrix.astype(np.float64)
    y = np.eye(n_classes)[sub.labels]
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    n = len(x)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        lr = cosine_interp(cfg.lr, 0.0, epoch, max(cfg.epochs - 1, 1))
        order = np.random.default_rng([cfg.seed, 0x11EA, epoch]).permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            logits = x[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - y[idx]) / len(idx)
            gw = x[idx].T @ g
            gb = g.sum(axis=0)
            vw = cfg.momentum * vw + gw
            vb = cfg.momentum * vb + gb
            w -= lr * vw
            b -= lr * vb
    preds = np.argmax(test.matrix.astype(np.float64) @ w + b, axis=1)
    return float((preds == test.labels).mean())


# Embedding file I/O -----------------------------------------------------------


def save_embeddings(path: str, es: EmbeddingSet) -> None:
    save_container(
        path,
        "embeddings",
        {"ids": es.ids, "l2_normalized": es.l2_normalized, "n": len(es), "dim": int(es.matrix.shape[1])},
        {"matrix": es.matrix, "labels": es.labels},
    )


def load_embeddings(path: str) -> EmbeddingSet:
    c = load_container(path, expect_kind="embeddings")
    return EmbeddingSet(
        matrix=c.arrays["matrix"],
        labels=c.arrays["labels"],
        ids=list(c.meta["ids"]),
        l2_normalized=bool(c.meta["l2_normalized"]),
    )
