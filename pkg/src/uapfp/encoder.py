"""Contrastive fingerprint encoder.

A shared-weight dense tower maps fingerprints onto the unit hypersphere;
training minimises the supervised contrastive loss so victim and piracy
fingerprints (label 0) gather together and homologous ones (label 1)
move away.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .numcore import RandomStream, check_finite_matrix

logger = logging.getLogger(__name__)

LABEL_RULE = {"victim": 0, "piracy": 0, "homologous": 1}


def _normalize(h):
    norm = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalise a zero embedding")
    return h / norm, norm


def supcon_loss(embeddings, labels, tau=0.1, return_grad=False):
    """Supervised contrastive loss, summed over anchors.

    Cosines are taken between the given vectors (they need not be unit
    length).  Anchors with no positive in the batch contribute zero.  With
    ``return_grad`` the gradient w.r.t. ``embeddings`` is returned as well.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    h = check_finite_matrix(embeddings, "embeddings")
    labels = np.asarray(labels).ravel()
    b = h.shape[0]
    if b < 2 or labels.size != b:
        raise ValueError("need a batch of >= 2 embeddings with one label each")
    z, norm = _normalize(h)
    s = (z @ z.T) / tau
    eye = np.eye(b, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(axis=1)
    has = n_pos > 0
    s_masked = np.where(eye, -np.inf, s)
    row_max = s_masked.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(s_masked - row_max).sum(axis=1))
    pos_mean = np.where(has, (s * pos).sum(axis=1) / np.maximum(n_pos, 1), 0.0)
    per_anchor = np.where(has, lse - pos_mean, 0.0)
    loss = float(per_anchor.sum())
    if not return_grad:
        return loss
    soft = np.exp(s_masked - lse[:, None])
    g = soft - pos / np.maximum(n_pos, 1)[:, None]
    g[~has] = 0.0
    dz = (g + g.T) @ z / tau
    dh = (dz - z * np.sum(dz * z, axis=1, keepdims=True)) / norm
    return loss, dh


@dataclass
class EncoderNet:
    backbone: nn.DenseNet  # final layer linear; output is l2-normalised
    tau: float = 0.5
    label_rule: dict = field(default_factory=lambda: dict(LABEL_RULE))
    trained: bool = False

    @property
    def input_dim(self) -> int:
        return self.backbone.input_dim

    @property
    def embedding_dim(self) -> int:
        return self.backbone.n_classes


def init_encoder(input_dim, hidden=(512, 128), embedding_dim=64, tau=0.5, rng=None) -> EncoderNet:
    return EncoderNet(nn.init_dense_net(input_dim, hidden, embedding_dim, "relu", 0.0, rng), tau)


def encode(enc: EncoderNet, fingerprints) -> np.ndarray:
    """Unit-norm embeddings; accepts one fingerprint vector or a matrix of them."""
    f = np.asarray(getattr(fingerprints, "values", fingerprints), dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    if f.shape[1] != enc.input_dim:
        raise ValueError(f"fingerprint length {f.shape[1]} != encoder input {enc.input_dim}")
    z, _ = _normalize(nn.logits(enc.backbone, f))
    return z[0] if single else z


def fingerprint_similarity(enc: EncoderNet, fp_a, fp_b) -> np.ndarray | float:
    """Cosine of encoded fingerprints (row-wise for matrices)."""
    za = encode(enc, fp_a)
    zb = encode(enc, fp_b)
    sims = np.clip(np.sum(np.atleast_2d(za) * np.atleast_2d(zb), axis=1), -1.0, 1.0)
    return float(sims[0]) if np.ndim(za) == 1 else sims


@dataclass
class EncoderTrainConfig:
    tau: float = 0.5
    batch_size: int = 512
    epochs: int = 60
    learning_rate: float = 1e-3
    hidden: tuple = (512, 128)
    embedding_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


def train_encoder(fingerprints, labels, cfg: EncoderTrainConfig, init: EncoderNet | None = None):
    """Train on a labelled view bank; returns ``(encoder, per-epoch mean anchor loss)``."""
    x = check_finite_matrix(fingerprints, "view bank")
    y = np.asarray(labels).ravel()
    if np.unique(y).size < 2:
        raise ValueError("the view bank must contain both labels")
    rng = RandomStream(cfg.seed)
    enc = init or init_encoder(x.shape[1], cfg.hidden, cfg.embedding_dim, cfg.tau, rng.spawn(0))
    net = enc.backbone.copy()
    params = list(net.params())
    opt = nn.Optimizer("adam", cfg.learning_rate, params)
    order_rng = rng.spawn(1)
    trace = []
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(x.shape[0])
        total, anchors = 0.0, 0
        for start in range(0, x.shape[0], cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            cache = nn._forward_cache(net, x[idx])
            loss, dh = supcon_loss(cache[1][-1], y[idx], cfg.tau, return_grad=True)
            if not np.isfinite(loss):
                raise nn.TrainingDivergedError(f"contrastive loss became non-finite in epoch {epoch}", trace)
            grads, _ = nn._backward(net, cache, dh / idx.size)
            opt.step(params, [g for pair in zip(grads.weights, grads.biases) for g in pair])
            total += loss
            anchors += idx.size
        trace.append(total / anchors)
    return EncoderNet(net, cfg.tau, dict(enc.label_rule), trained=True), trace


# ------------------------------------------------------------------- I/O


def save_encoder(enc: EncoderNet, path):
    nn.save_model(
        enc.backbone,
        path,
        extra={"embedding_dim": enc.embedding_dim, "tau": enc.tau, "label_rule": enc.label_rule, "trained": enc.trained},
    )


def load_encoder(path) -> EncoderNet:
    doc = json.loads(Path(path).read_text())
    return EncoderNet(nn.net_from_dict(doc), float(doc["tau"]), dict(doc["label_rule"]), bool(doc.get("trained", True)))


# -------------------------------------------------------------- estimator


class ContrastiveEncoder(TransformerMixin, BaseEstimator):
    """``fit(X, y)`` on fingerprint rows with 0/1 labels; ``transform`` gives unit embeddings."""

    def __init__(self, tau=0.5, batch_size=512, epochs=60, learning_rate=1e-3, hidden=(512, 128), embedding_dim=64, seed=0):
        self.tau = tau
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.hidden = hidden
        self.embedding_dim = embedding_dim
        self.seed = seed

    def fit(self, X, y):
        cfg = EncoderTrainConfig(
            self.tau, self.batch_size, self.epochs, self.learning_rate, tuple(self.hidden), self.embedding_dim, self.seed
        )
        self.encoder_, self.loss_curve_ = train_encoder(X, y, cfg)
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return encode(self.encoder_, np.atleast_2d(X))

    def similarity(self, A, B):
        check_is_fitted(self, "encoder_")
        return fingerprint_similarity(self.encoder_, np.atleast_2d(A), np.atleast_2d(B))
