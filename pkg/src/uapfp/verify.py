"""Ownership decisions: similarity aggregation, the one-sided t-test and zoo-wide AUC."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as encmod
from . import nn
from .fingerprint import BlackBox, QueryError, ViewSet, fingerprint
from .numcore import as_stream, auc, welch_ttest_one_sided

logger = logging.getLogger(__name__)

DECISIONS = ("piracy", "inconclusive")
INCONCLUSIVE_NOTE = "a one-sided test cannot establish independence; inconclusive is not a finding of innocence"


@dataclass
class SimilarityReport:
    suspect_id: str
    sims: np.ndarray  # one per view pair
    mean: float
    std: float

    @classmethod
    def from_sims(cls, suspect_id, sims):
        sims = np.asarray(sims, dtype=np.float64).ravel()
        if sims.size == 0:
            raise ValueError("no similarities to report")
        if np.any(np.abs(sims) > 1.0 + 1e-12):
            raise ValueError("similarities must lie in [-1, 1]")
        return cls(suspect_id, sims, float(sims.mean()), float(sims.std()))


@dataclass
class VerificationVerdict:
    suspect_id: str
    p_value: float
    alpha: float
    decision: str
    fingerprints_used: int
    homologous_reference: dict = field(default_factory=dict)
    n_queries: int = 0
    p_values: list = field(default_factory=list)  # per repeat when resampled

    def __post_init__(self):
        if self.decision != ("piracy" if self.p_value < self.alpha else "inconclusive"):
            raise ValueError("decision must be 'piracy' exactly when p < alpha")


def model_similarity(enc: encmod.EncoderNet, victim_fps, suspect_fps, suspect_id="") -> SimilarityReport:
    """Cosine of encoded fingerprints, view j of the victim against view j of the suspect."""
    v = np.atleast_2d(np.asarray(victim_fps, dtype=np.float64))
    s = np.atleast_2d(np.asarray(suspect_fps, dtype=np.float64))
    if v.size == 0 or s.size == 0:
        raise ValueError("fingerprint sets must be non-empty")
    if v.shape != s.shape:
        raise ValueError(f"view count mismatch: victim {v.shape}, suspect {s.shape}")
    return SimilarityReport.from_sims(suspect_id, encmod.fingerprint_similarity(enc, s, v))


def _reference_stats(homo):
    homo = np.asarray(homo, dtype=np.float64)
    return {"mean": float(homo.mean()), "std": float(homo.std(ddof=1)), "n": int(homo.size)}


def ownership_test(suspect_sims, homologous_sims, alpha=0.05, suspect_id="") -> VerificationVerdict:
    """One-sided Welch test of H0: mean(suspect) < mean(homologous); rejection means piracy."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    s = np.asarray(suspect_sims, dtype=np.float64).ravel()
    p = welch_ttest_one_sided(s, homologous_sims)
    return VerificationVerdict(
        suspect_id, p, alpha, "piracy" if p < alpha else "inconclusive", int(s.size),
        _reference_stats(homologous_sims),
    )


def resampling_plan(n_views, n_reference, n_fingerprints=20, repeats=30, rng=None):
    """Per repeat: ``n_fingerprints`` distinct view ids and as many reference ids."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = as_stream(rng)
    plan = []
    for t in range(repeats):
        r = rng.spawn(t)
        plan.append((r.spawn(0).choice(n_views, min(n_fingerprints, n_views)),
                     r.spawn(1).choice(n_reference, min(n_fingerprints, n_reference))))
    return plan


def repeated_ownership_test(suspect_sims, homologous_sims, alpha=0.05, n_fingerprints=20, repeats=30, rng=None,
                            suspect_id="", plan=None) -> VerificationVerdict:
    """Repeat the test on resampled fingerprint subsets and decide on the mean p-value.

    ``suspect_sims`` is indexed by view; with an explicit ``plan`` only the
    views it names are read, so unqueried views may hold NaN.
    """
    s = np.asarray(suspect_sims, dtype=np.float64).ravel()
    h = np.asarray(homologous_sims, dtype=np.float64).ravel()
    plan = plan if plan is not None else resampling_plan(s.size, h.size, n_fingerprints, repeats, rng)
    ps = [ownership_test(s[vi], h[hi], alpha).p_value for vi, hi in plan]
    p = float(np.mean(ps))
    used = np.unique(np.concatenate([vi for vi, _ in plan]))
    return VerificationVerdict(suspect_id, p, alpha, "piracy" if p < alpha else "inconclusive",
                               int(used.size), _reference_stats(h), p_values=[float(x) for x in ps])


def zoo_auc(enc: encmod.EncoderNet, manifest, bank: dict, split="test"):
    """AUC of mean similarity, piracy (positive) vs homologous (negative) models of ``split``.

    ``bank`` maps model id to its view-fingerprint matrix and must hold
    ``victim``.  Returns ``(auc, rows)`` with one ``(id, role, mean, std)`` row per model.
    """
    rows = []
    for role in ("piracy", "homologous"):
        for rec in manifest.select(role=role, split=split):
            rep = model_similarity(enc, bank["victim"], bank[rec.id], rec.id)
            rows.append((rec.id, role, rep.mean, rep.std))
    pos = [r[2] for r in rows if r[1] == "piracy"]
    neg = [r[2] for r in rows if r[1] == "homologous"]
    if not pos or not neg:
        raise ValueError("zoo_auc needs at least one piracy and one homologous model")
    return auc(pos, neg), rows


# ------------------------------------------------------ end-to-end verify


@dataclass
class VictimPackage:
    """What the defender keeps: the UAP, the probe views and their source inputs,
    the victim's own view fingerprints, the encoder and the homologous reference sims."""

    uap: np.ndarray
    inputs: np.ndarray
    views: ViewSet
    victim_bank: np.ndarray  # (k, 2nN)
    encoder: encmod.EncoderNet
    homologous_sims: np.ndarray
    top_k: int | None = None


@dataclass
class VerifyConfig:
    alpha: float = 0.05
    n_fingerprints: int = 20
    repeats: int = 30
    seed: int = 0

    def validate(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("verify.alpha must lie in (0, 1)")
        if self.n_fingerprints < 2:
            raise ValueError("verify.n_fingerprints must be >= 2")
        if self.repeats < 1:
            raise ValueError("verify.repeats must be >= 1")


class VerificationError(RuntimeError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def verify_ownership(pkg: VictimPackage, query, cfg: VerifyConfig, suspect_id="suspect"):
    """Fingerprint a black-box suspect on the victim's views and run the repeated test.

    Only the views drawn by the resampling plan are queried, each once
    (2n queries per fingerprint).  Returns ``(verdict, report)``; the
    report covers the queried views.
    """
    cfg.validate()
    if isinstance(query, nn.DenseNet):
        raise TypeError("verify_ownership takes a black-box query function, not a model")
    box = query if isinstance(query, BlackBox) else BlackBox(query)
    k = pkg.views.k
    plan = resampling_plan(k, len(pkg.homologous_sims), cfg.n_fingerprints, cfg.repeats, cfg.seed)
    needed = np.unique(np.concatenate([vi for vi, _ in plan]))
    sims = np.full(k, np.nan)
    start = box.n_queries
    rows = {}
    for count, j in enumerate(needed):
        try:
            fp = fingerprint(box, pkg.uap, pkg.views.points(pkg.inputs, j), pkg.top_k)
        except QueryError as exc:
            partial = {"suspect_id": suspect_id, "views_done": count, "n_queries": box.n_queries - start}
            raise VerificationError(f"suspect query failed at view {int(j)}: {exc}", partial) from exc
        rows[int(j)] = fp.values
    mat = np.stack([rows[int(j)] for j in needed])
    sims[needed] = encmod.fingerprint_similarity(pkg.encoder, mat, pkg.victim_bank[needed])
    verdict = repeated_ownership_test(sims, pkg.homologous_sims, cfg.alpha, plan=plan, suspect_id=suspect_id)
    verdict.n_queries = box.n_queries - start
    return verdict, SimilarityReport.from_sims(suspect_id, sims[needed])


# ------------------------------------------------------------------- I/O


def verdict_to_dict(verdict: VerificationVerdict, sims=None) -> dict:
    doc = {
        "suspect_id": verdict.suspect_id,
        "p_value": verdict.p_value,
        "alpha": verdict.alpha,
        "decision": verdict.decision,
        "n_fingerprints": verdict.fingerprints_used,
        "n_queries": verdict.n_queries,
        "sims": [] if sims is None else [float(x) for x in np.asarray(sims).ravel()],
        "homologous_reference": verdict.homologous_reference,
        "p_values": verdict.p_values,
    }
    if verdict.decision == "inconclusive":
        doc["note"] = INCONCLUSIVE_NOTE
    return doc


def save_verdict(verdict: VerificationVerdict, path, sims=None):
    nn.dump_json(verdict_to_dict(verdict, sims), path)


def load_verdict(path) -> tuple[VerificationVerdict, list]:
    doc = json.loads(Path(path).read_text())
    v = VerificationVerdict(doc["suspect_id"], doc["p_value"], doc["alpha"], doc["decision"], doc["n_fingerprints"],
                            doc.get("homologous_reference", {}), doc["n_queries"], doc.get("p_values", []))
    return v, doc["sims"]


VERDICT_COLUMNS = ["suspect_id", "role", "mean_sim", "std_sim", "p_value", "alpha", "decision", "n_fingerprints", "n_queries"]


def write_verdicts_csv(rows, path):
    """``rows``: iterable of (verdict, role, SimilarityReport)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_COLUMNS)
        for verdict, role, rep in rows:
            w.writerow([verdict.suspect_id, role, f"{rep.mean:.6f}", f"{rep.std:.6f}", f"{verdict.p_value:.6g}",
                        verdict.alpha, verdict.decision, verdict.fingerprints_used, verdict.n_queries])
    return path


def report_to_dict(rep: SimilarityReport) -> dict:
    d = asdict(rep)
    d["sims"] = [float(x) for x in rep.sims]
    return d
