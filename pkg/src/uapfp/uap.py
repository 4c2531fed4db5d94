"""Local (DeepFool) and universal adversarial perturbations, plus UAP subspace analysis."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .numcore import RandomStream, as_stream, check_finite_matrix, svd

logger = logging.getLogger(__name__)

UAP_SCHEMA_VERSION = 1


# ---------------------------------------------------------------- DeepFool


@dataclass
class DeepFoolResult:
    perturbation: np.ndarray  # minimal r, before overshoot
    iterations: np.ndarray
    converged: np.ndarray


def deepfool_batch(net: nn.DenseNet, x, max_iter=50, overshoot=0.02, boundary_tol=1e-9) -> DeepFoolResult:
    """DeepFool on every row of ``x`` at once.

    Each iteration linearises the logits at ``x + (1 + overshoot) r`` and
    steps to the closest linearised boundary of the original class.  Rows
    whose top-2 logit gap is already below ``boundary_tol`` return r = 0.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    z0 = nn.logits(net, x)
    orig = np.argmax(z0, axis=1)
    top2 = np.sort(z0, axis=1)[:, -2:]
    r = np.zeros_like(x)
    iters = np.zeros(n, dtype=np.int64)
    done = (top2[:, 1] - top2[:, 0]) < boundary_tol
    rows = np.arange(n)
    for _ in range(max_iter):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        xp = x[active] + (1.0 + overshoot) * r[active]
        z, jac = nn.logit_jacobian(net, xp)
        k = orig[active]
        flipped = np.argmax(z, axis=1) != k
        done[active[flipped]] = True
        keep = ~flipped
        if not keep.any():
            break
        act = active[keep]
        z, jac, k = z[keep], jac[keep], k[keep]
        sub = np.arange(act.size)
        w = jac - jac[sub, k][:, None, :]
        f = z - z[sub, k][:, None]
        wn = np.linalg.norm(w, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f) / wn
        dist[sub, k] = np.inf
        dist[~np.isfinite(dist)] = np.inf
        best = np.argmin(dist, axis=1)
        step_ok = np.isfinite(dist[sub, best])
        scale = np.where(step_ok, np.abs(f[sub, best]) / np.maximum(wn[sub, best], 1e-300) ** 2, 0.0)
        r[act] += scale[:, None] * w[sub, best]
        iters[act] += 1
    else:
        active = np.flatnonzero(~done)
        if active.size:
            z = nn.logits(net, x[active] + (1.0 + overshoot) * r[active])
            done[active[np.argmax(z, axis=1) != orig[active]]] = True
    return DeepFoolResult(perturbation=r, iterations=iters, converged=done)


def deepfool(net: nn.DenseNet, x, max_iter=50, overshoot=0.02):
    """Single-point DeepFool; returns ``(r, converged)``."""
    res = deepfool_batch(net, np.asarray(x, dtype=np.float64)[None, :], max_iter, overshoot)
    return res.perturbation[0], bool(res.converged[0])


# ----------------------------------------------------------------- UAPs


@dataclass
class Uap:
    v: np.ndarray
    xi: float
    fooling_rate: float
    source_model_id: str = ""
    seed: int = 0
    reached_target: bool = True
    history: list = field(default_factory=list)


def default_xi(inputs) -> float:
    """2.0 x mean l2 norm / 10 of the evaluation inputs."""
    return 2.0 * float(np.mean(np.linalg.norm(np.asarray(inputs), axis=1))) / 10.0


def project_l2(v, xi):
    norm = np.linalg.norm(v)
    return v if norm <= xi else v * (xi / norm)


def fooling_rate(query, v, inputs) -> float:
    """Fraction of points whose argmax changes when ``v`` is added."""
    x = check_finite_matrix(inputs, "inputs")
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != x.shape[1]:
        raise ValueError(f"perturbation has length {v.size}, inputs have {x.shape[1]} features")
    clean = np.argmax(query(x), axis=1)
    pert = np.argmax(query(x + v), axis=1)
    return float(np.mean(clean != pert))


def generate_uap(
    net: nn.DenseNet,
    inputs,
    xi: float,
    target_fooling=0.8,
    max_epochs=10,
    rng=None,
    overshoot=0.02,
    max_iter=50,
    model_id="",
) -> Uap:
    """Universal perturbation by iterated DeepFool aggregation and l2-ball projection.

    Every epoch visits the points in a fresh seeded order; each point not
    yet fooled by ``v`` contributes a DeepFool step computed at ``x + v``.
    """
    x = check_finite_matrix(inputs, "inputs")
    if not xi > 0:
        raise ValueError("xi must be positive")
    rng = as_stream(rng)
    seed = rng.seed
    clean = nn.predict(net, x)
    v = np.zeros(x.shape[1])
    best_v, best_rate = v.copy(), 0.0
    history = []
    for _ in range(max_epochs):
        for i in rng.permutation(x.shape[0]):
            xv = x[i] + v
            if np.argmax(nn.logits(net, xv)) != clean[i]:
                continue
            res = deepfool_batch(net, xv[None, :], max_iter, overshoot)
            if res.converged[0]:
                v = project_l2(v + (1.0 + overshoot) * res.perturbation[0], xi)
        rate = float(np.mean(nn.predict(net, x + v) != clean))
        history.append(rate)
        if rate > best_rate:
            best_v, best_rate = v.copy(), rate
        if rate >= target_fooling:
            break
    reached = best_rate >= target_fooling
    if not reached:
        logger.warning("UAP reached fooling rate %.3f < target %.3f", best_rate, target_fooling)
    return Uap(best_v, float(xi), best_rate, model_id, seed, reached, history)


@dataclass
class UapMatrix:
    rows: np.ndarray  # (L, M)
    source_model_id: str
    fooling_rates: np.ndarray

    @property
    def L(self) -> int:
        return self.rows.shape[0]


def uap_matrix(net, inputs, L, xi, rng=None, model_id="", **kwargs) -> UapMatrix:
    """``L`` UAPs from independently seeded runs, stacked row-wise."""
    if L < 2:
        raise ValueError("a UAP matrix needs L >= 2")
    rng = as_stream(rng)
    uaps = [generate_uap(net, inputs, xi, rng=rng.spawn(i), model_id=model_id, **kwargs) for i in range(L)]
    return UapMatrix(np.stack([u.v for u in uaps]), model_id, np.array([u.fooling_rate for u in uaps]))


def _rows(m):
    return m.rows if isinstance(m, UapMatrix) else check_finite_matrix(m, "UAP matrix")


def victim_basis(victim_uaps, rtol=1e-10) -> np.ndarray:
    """Right-singular directions spanning the victim's UAP rows (r x M)."""
    res = svd(_rows(victim_uaps))
    return res.vt[: res.rank(rtol)]


def energies(uaps, basis) -> np.ndarray:
    """Sum over rows of squared projections onto each basis direction."""
    return np.sum((_rows(uaps) @ basis.T) ** 2, axis=0)


def principal_energy_profile(victim_uaps, suspect_uaps, top=5) -> np.ndarray:
    """(top, 2) array of (suspect energy, victim energy) per principal direction."""
    v, s = _rows(victim_uaps), _rows(suspect_uaps)
    if v.shape[1] != s.shape[1]:
        raise ValueError("victim and suspect UAPs differ in dimension")
    basis = victim_basis(v)
    if basis.shape[0] < top:
        raise ValueError(f"victim UAP matrix has rank {basis.shape[0]} < top={top}")
    basis = basis[:top]
    return np.column_stack([energies(s, basis), energies(v, basis)])


def inconsistency(victim_uaps, suspect_uaps) -> float:
    """Squared mismatch of per-direction UAP energies over the victim's singular basis."""
    v, s = _rows(victim_uaps), _rows(suspect_uaps)
    if v.shape[1] != s.shape[1]:
        raise ValueError("victim and suspect UAPs differ in dimension")
    basis = victim_basis(v)
    return float(np.sum((energies(s, basis) - energies(v, basis)) ** 2))


# ------------------------------------------------------------ borderpoints


def top2_gap(probs) -> np.ndarray:
    p = np.sort(np.atleast_2d(probs), axis=1)
    return p[:, -1] - p[:, -2]


def borderpoint(net: nn.DenseNet, xa, xb, tol=1e-6, max_steps=200):
    """Bisect the segment xa -> xb to a point whose top-2 confidence gap is below ``tol``."""
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    ca = int(nn.predict(net, xa)[0])
    cb = int(nn.predict(net, xb)[0])
    if ca == cb:
        raise ValueError("both endpoints have the same predicted class")
    lo, hi = xa, xb
    mid = 0.5 * (lo + hi)
    gap = float(top2_gap(nn.forward(net, mid))[0])
    for _ in range(max_steps):
        if gap < tol:
            break
        if int(nn.predict(net, mid)[0]) == ca:
            lo = mid
        else:
            hi = mid
        mid = 0.5 * (lo + hi)
        gap = float(top2_gap(nn.forward(net, mid))[0])
    return mid, gap


# ------------------------------------------------------------------- I/O


def save_uap(uap: Uap, path):
    nn.dump_json(
        {
            "schema_version": UAP_SCHEMA_VERSION,
            "model_id": uap.source_model_id,
            "xi": uap.xi,
            "fooling_rate": uap.fooling_rate,
            "seed": uap.seed,
            "v_b64": nn.encode_f32(uap.v),
        },
        path,
    )


def load_uap(path) -> Uap:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != UAP_SCHEMA_VERSION:
        raise ValueError(f"unsupported UAP schema_version {doc.get('schema_version')!r}")
    return Uap(
        v=nn.decode_f32(doc["v_b64"]),
        xi=float(doc["xi"]),
        fooling_rate=float(doc["fooling_rate"]),
        source_model_id=doc["model_id"],
        seed=int(doc["seed"]),
    )


# -------------------------------------------------------------- estimator


class UAPGenerator(TransformerMixin, BaseEstimator):
    """Fit a universal perturbation for ``model`` on ``X``; ``transform`` adds it."""

    def __init__(self, model=None, xi=None, target_fooling=0.8, max_epochs=10, overshoot=0.02, max_iter=50, seed=0):
        self.model = model
        self.xi = xi
        self.target_fooling = target_fooling
        self.max_epochs = max_epochs
        self.overshoot = overshoot
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y=None):
        X = check_finite_matrix(X, "X")
        xi = default_xi(X) if self.xi is None else self.xi
        uap = generate_uap(
            self.model, X, xi, self.target_fooling, self.max_epochs, RandomStream(self.seed),
            self.overshoot, self.max_iter,
        )
        self.uap_ = uap
        self.v_ = uap.v
        self.fooling_rate_ = uap.fooling_rate
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "v_")
        return check_finite_matrix(X, "X") + self.v_
