"""Black-box fingerprints: probe selection, multi-view augmentation, top-k truncation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn
from .numcore import as_stream, check_finite_matrix, kmeans
from .uap import deepfool_batch

FINGERPRINT_SCHEMA_VERSION = 1


class QueryError(RuntimeError):
    def __init__(self, message, query_index):
        super().__init__(message)
        self.query_index = query_index


class BlackBox:
    """Query-only access to a model that counts every input row it answers.

    ``top_k`` emulates an API returning only its top-k confidences.
    """

    def __init__(self, model, top_k=None):
        self._model = model
        self.top_k = top_k
        self.n_queries = 0

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = nn.forward(self._model, x) if isinstance(self._model, nn.DenseNet) else self._model(x)
        self.n_queries += x.shape[0]
        return truncate_top_k(out, self.top_k) if self.top_k else out


def truncate_top_k(probs, top_k):
    """Keep each row's ``top_k`` largest entries and zero the rest (no renormalisation)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if top_k is None or top_k >= probs.shape[1]:
        return probs
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    order = np.argsort(-probs, axis=1, kind="stable")
    out = np.zeros_like(probs)
    rows = np.arange(probs.shape[0])[:, None]
    out[rows, order[:, :top_k]] = probs[rows, order[:, :top_k]]
    return out


# ---------------------------------------------------------- probe points


@dataclass
class ProbePointSet:
    points: np.ndarray  # (n, M)
    indices: np.ndarray  # rows of the source dataset
    cluster_ids: np.ndarray
    assignments: np.ndarray  # cluster of every source point
    centroids: np.ndarray
    seed: int
    source: str = ""

    @property
    def n(self) -> int:
        return self.points.shape[0]


def select_probe_points(victim: nn.DenseNet, inputs, n: int, rng=None, max_iters=100, source="") -> ProbePointSet:
    """k-means (k = n) on the victim's last hidden layer; one representative per cluster.

    The representative is the member closest to its centroid (lowest row on ties).
    """
    x = check_finite_matrix(inputs, "inputs")
    if n > x.shape[0]:
        raise ValueError(f"n={n} exceeds the {x.shape[0]} available points")
    rng = as_stream(rng)
    reps = nn.hidden_representation(victim, x)
    km = kmeans(reps, n, max_iters, rng)
    chosen = np.empty(n, dtype=np.int64)
    for c in range(n):
        members = np.flatnonzero(km.assignments == c)
        d = np.sum((reps[members] - km.centroids[c]) ** 2, axis=1)
        chosen[c] = members[int(np.argmin(d))]
    return ProbePointSet(
        points=x[chosen], indices=chosen, cluster_ids=np.arange(n), assignments=km.assignments,
        centroids=km.centroids, seed=rng.seed, source=source,
    )


@dataclass
class ViewSet:
    """``view_indices[j, i]`` is the source row standing in for probe ``i`` in view ``j``."""

    view_indices: np.ndarray  # (k, n)
    pools: np.ndarray  # (n, k) nearest-neighbour rows per probe, nearest first

    @property
    def k(self) -> int:
        return self.view_indices.shape[0]

    def points(self, inputs, j) -> np.ndarray:
        return np.asarray(inputs)[self.view_indices[j]]


def make_views(victim: nn.DenseNet, inputs, probes: ProbePointSet, k: int, rng=None) -> ViewSet:
    """k views of the probe set built from each probe's k nearest neighbours.

    Neighbours are ranked by last-hidden-layer distance over the whole
    source set (probe excluded).  View j takes a distinct pool member per
    probe, so no neighbour is reused across views.
    """
    x = check_finite_matrix(inputs, "inputs")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = as_stream(rng)
    reps = nn.hidden_representation(victim, x)
    pools = np.empty((probes.n, k), dtype=np.int64)
    for i, row in enumerate(probes.indices):
        d = np.sum((reps - reps[row]) ** 2, axis=1)
        d[row] = np.inf
        order = np.argsort(d, kind="stable")
        if np.isinf(d[order[k - 1]]):
            raise ValueError(f"cluster {probes.cluster_ids[i]}: fewer than {k} neighbours available")
        pools[i] = order[:k]
    views = np.empty((k, probes.n), dtype=np.int64)
    for i in range(probes.n):
        views[:, i] = pools[i, rng.spawn(i).permutation(k)]
    return ViewSet(view_indices=views, pools=pools)


# ------------------------------------------------------------ fingerprints


@dataclass
class Fingerprint:
    values: np.ndarray  # length 2nN: [f(x1), f(x1+v), ..., f(xn), f(xn+v)]
    n: int
    N: int
    model_id: str = ""
    uap_id: str = ""
    top_k: int | None = None

    def blocks(self) -> np.ndarray:
        return self.values.reshape(2 * self.n, self.N)


def fingerprint_inputs(points, v) -> np.ndarray:
    """The 2n query rows, interleaving each point with its perturbed copy."""
    points = check_finite_matrix(points, "points")
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != points.shape[1]:
        raise ValueError(f"UAP has length {v.size}, points have {points.shape[1]} features")
    q = np.empty((2 * points.shape[0], points.shape[1]))
    q[0::2] = points
    q[1::2] = points + v
    return q


def _query(query, rows):
    try:
        return np.asarray(query(rows), dtype=np.float64)
    except Exception as exc:
        raise QueryError(f"suspect query failed: {exc}", 0) from exc


def fingerprint(query, v, points, top_k=None, model_id="", uap_id="") -> Fingerprint:
    """Issue exactly 2n black-box queries and concatenate the outputs."""
    q = fingerprint_inputs(points, v)
    out = truncate_top_k(_query(query, q), top_k)
    return Fingerprint(out.ravel(), points.shape[0], out.shape[1], model_id, uap_id, top_k)


def view_fingerprints(query, v, inputs, views: ViewSet, top_k=None, view_ids=None) -> np.ndarray:
    """Fingerprint matrix, one row per requested view (2n queries each)."""
    x = np.asarray(inputs, dtype=np.float64)
    view_ids = range(views.k) if view_ids is None else view_ids
    return np.stack([fingerprint(query, v, views.points(x, j), top_k).values for j in view_ids])


def lap_points(model: nn.DenseNet, points, norm, max_iter=50, overshoot=0.02):
    """DeepFool perturbations of each point rescaled to l2 ``norm``; returns (points', converged)."""
    if max_iter < 1:
        raise ValueError("DeepFool needs at least one iteration")
    points = check_finite_matrix(points, "points")
    res = deepfool_batch(model, points, max_iter, overshoot)
    r = res.perturbation
    length = np.linalg.norm(r, axis=1, keepdims=True)
    safe = np.where(length > 0, length, 1.0)
    return points + r * (norm / safe), res.converged


def lap_fingerprint(model: nn.DenseNet, points, norm, query=None, max_iter=50, overshoot=0.02, top_k=None) -> Fingerprint:
    """Local-AP baseline: [f(x_i), f(x_i')] with x_i' a DeepFool point crafted on ``model``."""
    perturbed, _ = lap_points(model, points, norm, max_iter, overshoot)
    query = query or (lambda z: nn.forward(model, z))
    q = np.empty((2 * points.shape[0], points.shape[1]))
    q[0::2] = points
    q[1::2] = perturbed
    out = truncate_top_k(_query(query, q), top_k)
    return Fingerprint(out.ravel(), points.shape[0], out.shape[1], top_k=top_k)


# ------------------------------------------------------------------- I/O


def fingerprint_to_dict(fp: Fingerprint, view_index=None) -> dict:
    doc = {
        "schema_version": FINGERPRINT_SCHEMA_VERSION,
        "model_id": fp.model_id,
        "uap_id": fp.uap_id,
        "n": fp.n,
        "N": fp.N,
        "top_k": fp.top_k,
        "values_b64": nn.encode_f32(fp.values),
    }
    if view_index is not None:
        doc["view_index"] = int(view_index)
    return doc


def save_fingerprint(fp: Fingerprint, path, view_index=None):
    nn.dump_json(fingerprint_to_dict(fp, view_index), path)


def load_fingerprint(path) -> Fingerprint:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != FINGERPRINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported fingerprint schema_version {doc.get('schema_version')!r}")
    values = nn.decode_f32(doc["values_b64"])
    if values.size != 2 * doc["n"] * doc["N"]:
        raise ValueError("fingerprint length does not equal 2nN")
    return Fingerprint(values, doc["n"], doc["N"], doc["model_id"], doc["uap_id"], doc["top_k"])


def save_view_bank(bank, directory, model_id, uap_id="", n=None, N=None, top_k=None):
    """One JSON file per view: ``<directory>/view_<j>.fp.json``."""
    directory = Path(directory)
    bank = np.asarray(bank)
    for j, row in enumerate(bank):
        save_fingerprint(Fingerprint(row, n, N, model_id, uap_id, top_k), directory / f"view_{j:04d}.fp.json", j)


def load_view_bank(directory) -> np.ndarray:
    files = sorted(Path(directory).glob("view_*.fp.json"))
    if not files:
        raise FileNotFoundError(f"no view files in {directory}")
    return np.stack([load_fingerprint(f).values for f in files])


# -------------------------------------------------------------- estimator


class ProbeSelector(BaseEstimator):
    """Select probe points and their views from the victim's training inputs.

    After ``fit(X)``: ``probes_`` (:class:`ProbePointSet`) and ``views_``
    (:class:`ViewSet`).  ``transform`` maps inputs to the victim's
    last-hidden-layer representation used for clustering.
    """

    def __init__(self, victim=None, n_points=100, n_views=200, seed=0, max_iters=100):
        self.victim = victim
        self.n_points = n_points
        self.n_views = n_views
        self.seed = seed
        self.max_iters = max_iters

    def fit(self, X, y=None):
        rng = as_stream(self.seed)
        X = check_finite_matrix(X, "X")
        self.probes_ = select_probe_points(self.victim, X, self.n_points, rng.spawn(0), self.max_iters)
        self.views_ = make_views(self.victim, X, self.probes_, self.n_views, rng.spawn(1))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "probes_")
        return nn.hidden_representation(self.victim, X)
