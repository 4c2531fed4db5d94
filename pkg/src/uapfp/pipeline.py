"""Stage runners behind the CLI.

Every stage writes under ``<out>/<run-id>/`` and loads whatever upstream
artifacts already exist there, so stages can be rerun independently.
Timings live only in ``run-manifest.json``; CSV outputs are a pure
function of the config and seed.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import encoder as encmod
from . import fingerprint as fpm
from . import nn, report, uap, verify, zoo
from .config import PipelineConfig, save_config
from .numcore import RandomStream, auc, cosine_rows

logger = logging.getLogger(__name__)

RUN_MANIFEST_VERSION = 1


class StageError(RuntimeError):
    pass


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{x:.6f}" if isinstance(x, (float, np.floating)) else x for x in row])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class Run:
    """One pipeline run: config, derived random streams, lazily loaded artifacts."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg.validate()
        self.dir = cfg.run_dir
        self.master = RandomStream(cfg.seed)
        self._mem = {}

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def stream(self, name) -> RandomStream:
        return self.master.spawn(zlib.crc32(name.encode()))

    # ---------------------------------------------------- run manifest

    def _manifest(self):
        p = self.path("run-manifest.json")
        if p.exists():
            return json.loads(p.read_text())
        return {"schema_version": RUN_MANIFEST_VERSION, "run_id": self.dir.name, "seed": self.cfg.seed, "stages": {}}

    def record(self, stage, artifacts, seconds, status="ok", error=""):
        doc = self._manifest()
        doc["stages"][stage] = {
            "status": status,
            "seconds": round(seconds, 3),
            "artifacts": sorted(str(Path(a).relative_to(self.dir)) for a in artifacts),
            "error": error,
        }
        nn.dump_json(doc, self.path("run-manifest.json"))

    # ------------------------------------------------ lazy artifacts

    @property
    def data(self) -> zoo.ZooData:
        if "data" not in self._mem:
            self._mem["data"] = zoo.load_zoo_data(self.cfg.data)
        return self._mem["data"]

    def zoo(self):
        if "zoo" not in self._mem:
            p = self.path("zoo", "zoo.json")
            if not p.exists():
                stage_zoo(self)
            else:
                m = zoo.load_manifest(p)
                self._mem["zoo"] = (m, zoo.load_models(m, p.parent))
        return self._mem["zoo"]

    def victim_uap(self) -> uap.Uap:
        if "uap" not in self._mem:
            p = self.path("uap", "victim.uap.json")
            if not p.exists():
                stage_uap(self, subspace=False)
            else:
                self._mem["uap"] = uap.load_uap(p)
        return self._mem["uap"]

    def probes_views(self):
        if "views" not in self._mem:
            p = self.path("fingerprint", "views.json")
            if not p.exists():
                self._make_views()
            else:
                doc = json.loads(p.read_text())
                x = self.data.victim.inputs
                idx = np.asarray(doc["probe_indices"], dtype=np.int64)
                probes = fpm.ProbePointSet(x[idx], idx, np.arange(idx.size), np.asarray(doc["assignments"]),
                                           np.empty((0, 0)), doc["seed"], "victim-train")
                views = fpm.ViewSet(np.asarray(doc["view_indices"], dtype=np.int64), np.asarray(doc["pools"], dtype=np.int64))
                self._mem["views"] = (probes, views)
        return self._mem["views"]

    def _make_views(self):
        fc = self.cfg.fingerprint
        probes, views = make_probes_views(self, fc.n, fc.k)
        p = self.path("fingerprint", "views.json")
        nn.dump_json({
            "n": fc.n, "k": fc.k, "seed": probes.seed, "source": "victim-train",
            "probe_indices": probes.indices.tolist(), "assignments": probes.assignments.tolist(),
            "view_indices": views.view_indices.tolist(), "pools": views.pools.tolist(),
        }, p)
        self._mem["views"] = (probes, views)

    def banks(self) -> dict:
        if "banks" not in self._mem:
            root = self.path("fingerprint", "banks")
            manifest, _ = self.zoo()
            ids = [e.id for e in manifest.entries if e.status == "ok"]
            if all((root / i).exists() for i in ids):
                self._mem["banks"] = {i: fpm.load_view_bank(root / i) for i in ids}
            else:
                stage_fingerprint(self)
        return self._mem["banks"]

    def encoder(self) -> encmod.EncoderNet:
        if "encoder" not in self._mem:
            p = self.path("encoder", "encoder.json")
            if not p.exists():
                stage_train_encoder(self)
            else:
                self._mem["encoder"] = encmod.load_encoder(p)
        return self._mem["encoder"]


# ------------------------------------------------------------- helpers


def make_probes_views(run: Run, n, k):
    victim = run.zoo()[1]["victim"]
    x = run.data.victim.inputs
    probes = fpm.select_probe_points(victim, x, n, run.stream(f"probes-{n}"), source="victim-train")
    views = fpm.make_views(victim, x, probes, k, run.stream(f"views-{n}-{k}"))
    return probes, views


def model_bank(model, v, inputs, views, top_k=None, points=None):
    """All-view fingerprint matrix of ``model`` (rounded to the stored float32 values)."""
    box = fpm.BlackBox(model)
    if points is None:
        bank = fpm.view_fingerprints(box, v, inputs, views, top_k)
    else:
        bank = lap_view_fingerprints(box, inputs, points, views, top_k)
    if box.n_queries != 2 * views.view_indices.size:
        raise StageError(f"query accounting mismatch: {box.n_queries} != {2 * views.view_indices.size}")
    return _f32(bank)


def lap_view_fingerprints(query, inputs, perturbed, views, top_k=None):
    """LAP analogue of view fingerprints: row i is paired with its own crafted point."""
    rows = []
    for j in range(views.k):
        idx = views.view_indices[j]
        q = np.empty((2 * idx.size, inputs.shape[1]))
        q[0::2] = inputs[idx]
        q[1::2] = perturbed[idx]
        rows.append(fpm.truncate_top_k(query(q), top_k).ravel())
    return np.stack(rows)


def encoder_train_config(run: Run, seed_name="encoder") -> encmod.EncoderTrainConfig:
    ec = run.cfg.encoder
    return encmod.EncoderTrainConfig(ec.tau, ec.batch_size, ec.epochs, ec.learning_rate, tuple(ec.hidden),
                                     ec.embedding_dim, run.stream(seed_name).seed)


def fit_encoder(run: Run, banks, seed_name="encoder"):
    """Train on every view of the victim and of the training-split suspects."""
    manifest, _ = run.zoo()
    ids = ["victim"] + [e.id for e in manifest.select(split="train")]
    x = np.concatenate([banks[i] for i in ids])
    y = np.concatenate([np.full(banks[i].shape[0], encmod.LABEL_RULE[manifest.get(i).role]) for i in ids])
    enc, trace = encmod.train_encoder(x, y, encoder_train_config(run, seed_name))
    return encmod.EncoderNet(nn.snap_float32(enc.backbone), enc.tau, enc.label_rule, True), trace


def test_scores(run: Run, enc, banks):
    """(auc, piracy mean, homologous mean, rows) on held-out models."""
    manifest, _ = run.zoo()
    a, rows = verify.zoo_auc(enc, manifest, banks)
    pm = float(np.mean([r[2] for r in rows if r[1] == "piracy"]))
    hm = float(np.mean([r[2] for r in rows if r[1] == "homologous"]))
    return a, pm, hm, rows


def homologous_pool(run: Run, enc, banks):
    manifest, _ = run.zoo()
    return np.concatenate([
        verify.model_similarity(enc, banks["victim"], banks[e.id]).sims for e in manifest.select("homologous", "test")
    ])


def mean_sim(run: Run, enc, bank):
    return float(np.mean(encmod.fingerprint_similarity(enc, bank, run.banks()["victim"])))


# -------------------------------------------------------------- stages


def stage_zoo(run: Run):
    out = run.path("zoo")
    manifest, models, _ = zoo.build_zoo(run.cfg.data, run.cfg.zoo, run.stream("zoo").seed, out, zd=run.data)
    failed = [e.id for e in manifest.entries if e.status != "ok"]
    if failed:
        logger.warning("zoo entries failed: %s", failed)
    run._mem["zoo"] = (manifest, models)
    return [out / "zoo.json", out / "zoo_metrics.csv"] + [out / e.path for e in manifest.entries if e.status == "ok"]


def stage_uap(run: Run, subspace=True):
    """Victim UAP for fingerprinting, plus the UAP-subspace comparison across held-out models."""
    uc = run.cfg.uap
    manifest, models = run.zoo()
    x = run.data.victim.inputs
    xi = uc.xi if uc.xi is not None else uap.default_xi(x)
    t = time.time()
    u = uap.generate_uap(models["victim"], x, xi, uc.target_fooling, uc.max_epochs, run.stream("uap"),
                         uc.overshoot, uc.max_iter, "victim")
    u.v = _f32(u.v)
    u.fooling_rate = uap.fooling_rate(fpm.BlackBox(models["victim"]), u.v, x)
    out = run.path("uap")
    uap.save_uap(u, out / "victim.uap.json")
    run.record("uap:victim", [out / "victim.uap.json"], time.time() - t)
    run._mem["uap"] = u
    arts = [out / "victim.uap.json"]
    arts.append(write_csv(out / "uap_summary.csv", ["model_id", "xi", "norm", "fooling_rate", "reached_target"],
                          [["victim", float(u.xi), float(np.linalg.norm(u.v)), float(u.fooling_rate), int(u.fooling_rate >= uc.target_fooling)]]))
    if not subspace:
        return arts
    ids = ["victim"] + [e.id for e in manifest.select(split="test")]
    n_rows = uc.L if uc.L is not None else x.shape[1]
    xs = x
    if uc.n_points is not None and uc.n_points < len(x):
        xs = x[np.sort(run.stream("uap-subset").choice(len(x), uc.n_points))]
    mats = {}
    for mid in ids:
        mats[mid] = uap.uap_matrix(models[mid], xs, n_rows, xi, run.stream(f"uap-matrix-{mid}"), mid,
                                   target_fooling=uc.target_fooling, max_epochs=uc.max_epochs,
                                   overshoot=uc.overshoot, max_iter=uc.max_iter)
        nn.dump_json({"model_id": mid, "L": n_rows, "xi": xi, "rows_b64": nn.encode_f32(mats[mid].rows),
                      "fooling_rates": [float(r) for r in mats[mid].fooling_rates]},
                     out / "matrices" / f"{mid}.uaps.json")
    rows, prof = [], []
    basis_top = min(5, uap.victim_basis(mats["victim"]).shape[0])
    for mid in ids:
        role = manifest.get(mid).role
        rows.append([mid, role, uap.inconsistency(mats["victim"], mats[mid]), float(np.mean(mats[mid].fooling_rates))])
        for d, (es, ev) in enumerate(uap.principal_energy_profile(mats["victim"], mats[mid], basis_top)):
            prof.append([mid, role, d, float(es), float(ev)])
    arts.append(write_csv(out / "inconsistency.csv", ["model_id", "role", "inconsistency", "mean_fooling_rate"], rows))
    arts.append(write_csv(out / "energy_profile.csv", ["model_id", "role", "direction", "suspect_energy", "victim_energy"], prof))
    return arts


def stage_fingerprint(run: Run):
    manifest, models = run.zoo()
    u = run.victim_uap()
    probes, views = run.probes_views()
    x = run.data.victim.inputs
    root = run.path("fingerprint", "banks")
    banks = {}
    for e in manifest.entries:
        if e.status != "ok":
            continue
        banks[e.id] = model_bank(models[e.id], u.v, x, views, run.cfg.fingerprint.top_k)
        fpm.save_view_bank(banks[e.id], root / e.id, e.id, "victim", probes.n, models[e.id].n_classes,
                           run.cfg.fingerprint.top_k)
    src = [[e.id, e.role, e.split, probes.n, 2 * probes.n * views.k] for e in manifest.entries if e.status == "ok"]
    run._mem["banks"] = banks
    return [run.path("fingerprint", "views.json"),
            write_csv(run.path("fingerprint", "banks.csv"), ["model_id", "role", "split", "n", "n_queries"], src)]


def stage_train_encoder(run: Run):
    enc, trace = fit_encoder(run, run.banks())
    p = run.path("encoder", "encoder.json")
    encmod.save_encoder(enc, p)
    run._mem["encoder"] = enc
    return [p, write_csv(run.path("encoder", "loss.csv"), ["epoch", "loss"], [[i, float(v)] for i, v in enumerate(trace)])]


def stage_verify(run: Run):
    manifest, models = run.zoo()
    banks = run.banks()
    enc = run.encoder()
    probes, views = run.probes_views()
    homo = homologous_pool(run, enc, banks)
    pkg = verify.VictimPackage(run.victim_uap().v, run.data.victim.inputs, views, banks["victim"], enc, homo,
                               run.cfg.fingerprint.top_k)
    vcfg = replace(run.cfg.verify, seed=run.stream("verify").seed)
    out = run.path("verify")
    arts, rows, sim_rows, view_rows = [], [], [], []
    for e in manifest.select(split="test"):
        verdict, rep = verify.verify_ownership(pkg, fpm.BlackBox(models[e.id]), vcfg, e.id)
        p = out / "verdicts" / f"{e.id}.verdict.json"
        verify.save_verdict(verdict, p, rep.sims)
        arts.append(p)
        rows.append((verdict, e.role, rep))
        full = verify.model_similarity(enc, banks["victim"], banks[e.id], e.id)
        sim_rows.append([e.id, e.role, full.mean, full.std])
        view_rows.extend([e.id, e.role, j, float(s)] for j, s in enumerate(full.sims))
    arts.append(verify.write_verdicts_csv(rows, out / "verdicts.csv"))
    arts.append(write_csv(out / "similarity.csv", ["model_id", "role", "mean_sim", "std_sim"], sim_rows))
    arts.append(write_csv(out / "view_sims.csv", ["model_id", "role", "view", "sim"], view_rows))
    a, _ = verify.zoo_auc(enc, manifest, banks)
    nn.dump_json({"auc": a, "homologous_reference": {"mean": float(homo.mean()), "std": float(homo.std(ddof=1)),
                                                      "n": int(homo.size)}}, out / "auc.json")
    arts.append(out / "auc.json")
    return arts


# ------------------------------------------------------------ ablations


def ablate_n(run: Run):
    rows = []
    manifest, models = run.zoo()
    v = run.victim_uap().v
    x = run.data.victim.inputs
    for n in run.cfg.ablate.n_values:
        if n == run.cfg.fingerprint.n:
            banks, enc = run.banks(), run.encoder()
        else:
            _, views = make_probes_views(run, n, run.cfg.fingerprint.k)
            banks = {e.id: model_bank(models[e.id], v, x, views, run.cfg.fingerprint.top_k)
                     for e in manifest.entries if e.status == "ok"}
            enc, _ = fit_encoder(run, banks)
        a, pm, hm, _ = test_scores(run, enc, banks)
        rows.append([n, pm, hm, pm - hm, a])
    return write_csv(run.path("ablate", "n_sweep.csv"), ["n", "piracy_mean", "homologous_mean", "gap", "auc"], rows)


def ablate_top_k(run: Run):
    rows = []
    base = run.banks()
    manifest, models = run.zoo()
    n_classes = models["victim"].n_classes
    for k in run.cfg.ablate.top_k_values:
        banks = {i: fpm.truncate_top_k(b.reshape(-1, n_classes), k).reshape(b.shape) for i, b in base.items()}
        enc, _ = fit_encoder(run, banks)
        a, pm, hm, _ = test_scores(run, enc, banks)
        rows.append([k, pm, hm, pm - hm, a])
    return write_csv(run.path("ablate", "topk.csv"), ["top_k", "piracy_mean", "homologous_mean", "gap", "auc"], rows)


def ablate_lap(run: Run):
    """UAP fingerprints against LAP fingerprints on the same zoo, probes, views and budget."""
    manifest, models = run.zoo()
    u = run.victim_uap()
    _, views = run.probes_views()
    x = run.data.victim.inputs
    norm = float(np.linalg.norm(u.v))
    perturbed, converged = fpm.lap_points(models["victim"], x, norm)
    lap_banks = {e.id: model_bank(models[e.id], None, x, views, run.cfg.fingerprint.top_k, points=perturbed)
                 for e in manifest.entries if e.status == "ok"}
    enc, _ = fit_encoder(run, lap_banks)
    rows = []
    for name, enc_m, banks in (("uap", run.encoder(), run.banks()), ("lap", enc, lap_banks)):
        a, pm, hm, _ = test_scores(run, enc_m, banks)
        rows.append([name, pm, hm, pm - hm, a])
    rows.append(["lap_deepfool_converged", float(np.mean(converged)), "", "", ""])
    return write_csv(run.path("ablate", "uap_vs_lap.csv"), ["method", "piracy_mean", "homologous_mean", "gap", "auc"], rows)


def ablate_recovery(run: Run):
    """Fingerprint similarity of early-stopped extractions binned by recovery rate."""
    ac = run.cfg.ablate
    manifest, models = run.zoo()
    victim = models["victim"]
    zd = run.data
    rec = manifest.select("piracy", "test")[0]
    snaps = []

    def keep(epoch, net):
        snaps.append((epoch, nn.snap_float32(net)))

    tcfg = nn.TrainConfig(optimizer="sgd", learning_rate=0.002, batch_size=256, epochs=run.cfg.zoo.extraction_epochs,
                          schedule="constant")
    zoo.extract_piracy(fpm.BlackBox(victim), zd.attacker_inputs, tcfg, rec.architecture_id, run.cfg.zoo.label_mode,
                       run.stream("recovery").seed, victim.n_classes, callback=keep)
    edges = np.arange(ac.recovery_min, ac.recovery_max + 1e-9, ac.recovery_bin)
    enc = run.encoder()
    u = run.victim_uap()
    _, views = run.probes_views()
    rows, used = [], set()
    for epoch, net in snaps:
        r, agree = zoo.recovery_rate(net, victim, zd.test)
        b = int(np.searchsorted(edges, r, side="right")) - 1
        if b < 0 or b >= len(edges) - 1 or b in used:
            continue
        used.add(b)
        s = mean_sim(run, enc, model_bank(net, u.v, zd.victim.inputs, views, run.cfg.fingerprint.top_k))
        rows.append([float(edges[b]), epoch + 1, float(r), float(agree), s])
    return write_csv(run.path("ablate", "recovery.csv"), ["bin_lo", "epoch", "recovery", "agreement", "mean_sim"], rows)


def ablate_overlap(run: Run):
    ac = run.cfg.ablate
    zc = run.cfg.zoo
    manifest, models = run.zoo()
    zd = run.data
    enc = run.encoder()
    u = run.victim_uap()
    _, views = run.probes_views()
    rows = []
    for li, rate in enumerate(ac.overlap_rates):
        for i in range(ac.overlap_models):
            ms = run.stream(f"overlap-{li}-{i}")
            arch = zc.suspect_archs[i % len(zc.suspect_archs)]
            opt, bs = zoo._draw_hparams(zc, ms.spawn(0))
            hd = zoo.homologous_data(zd, rate, ms.spawn(2).seed, run.cfg.data.victim_fraction)
            net, _ = zoo.train_classifier(arch, hd.inputs, hd.labels, opt, bs, zc.epochs, ms.spawn(1).seed,
                                          schedule=zc.schedule, n_classes=zd.train.n_classes)
            s = mean_sim(run, enc, model_bank(net, u.v, zd.victim.inputs, views, run.cfg.fingerprint.top_k))
            agree = zoo.recovery_rate(net, models["victim"], zd.test)[1]
            rows.append([float(rate), i, arch, float(agree), s])
    return write_csv(run.path("ablate", "overlap.csv"), ["overlap_rate", "model", "arch", "agreement", "mean_sim"], rows)


def ablate_borderpoints(run: Run):
    """Victim borderpoints by bisection; top-2 gap of every held-out model there."""
    manifest, models = run.zoo()
    victim = models["victim"]
    x = run.data.victim.inputs
    pred = nn.predict(victim, x)
    rng = run.stream("borderpoints")
    order = rng.permutation(x.shape[0])
    pts = []
    for a, b in zip(order[0::2], order[1::2]):
        if pred[a] != pred[b]:
            p, gap = uap.borderpoint(victim, x[a], x[b])
            pts.append(p)
        if len(pts) == run.cfg.ablate.n_borderpoints:
            break
    pts = np.array(pts)
    rows = []
    for mid in ["victim"] + [e.id for e in manifest.select(split="test")]:
        gaps = uap.top2_gap(nn.forward(models[mid], pts))
        for i, g in enumerate(gaps):
            rows.append([mid, manifest.get(mid).role, i, f"{g:.6e}"])
    return write_csv(run.path("ablate", "borderpoints.csv"), ["model_id", "role", "point", "top2_gap"], rows)


def ablate_views(run: Run):
    """Raw-space cosine to the victim's source fingerprint: its own views vs piracy views."""
    manifest, models = run.zoo()
    u = run.victim_uap()
    probes, _ = run.probes_views()
    banks = run.banks()
    src = fpm.fingerprint(fpm.BlackBox(models["victim"]), u.v, probes.points, run.cfg.fingerprint.top_k).values
    rows = []
    cv = cosine_rows(banks["victim"], np.broadcast_to(src, banks["victim"].shape))
    rows.append(["victim_view", "victim", float(cv.mean())])
    for e in manifest.select("piracy", "train"):
        c = cosine_rows(banks[e.id], np.broadcast_to(src, banks[e.id].shape))
        rows.append(["piracy_view", e.id, float(c.mean())])
    return write_csv(run.path("ablate", "views.csv"), ["kind", "model_id", "mean_cos_to_source"], rows)


def stage_ablate(run: Run):
    arts = []
    for fn in (ablate_n, ablate_top_k, ablate_lap, ablate_recovery, ablate_overlap, ablate_borderpoints, ablate_views):
        t = time.time()
        arts.append(fn(run))
        run.record("ablate:" + fn.__name__.removeprefix("ablate_"), [arts[-1]], time.time() - t)
        logger.info("%s done in %.1fs", fn.__name__, time.time() - t)
    return arts


# ----------------------------------------------------------- robustness


def stage_robustness(run: Run):
    rc = run.cfg.robustness
    manifest, models = run.zoo()
    zd = run.data
    enc = run.encoder()
    u = run.victim_uap()
    _, views = run.probes_views()
    x = zd.victim.inputs
    rows, adv_rows, records = [], [], []
    ft_rng = run.stream("finetune-sample")
    ft_idx = ft_rng.choice(len(zd.test), max(1, int(round(rc.finetune_fraction * len(zd.test)))))
    ft = zd.test.subset(ft_idx)

    def score(net):
        return mean_sim(run, enc, model_bank(net, u.v, x, views, run.cfg.fingerprint.top_k)), nn.accuracy(net, zd.test.inputs, zd.test.labels)

    pir = manifest.select("piracy", "test")
    for e in pir:
        base = models[e.id]
        variants = [("none", "", base)]
        variants += [("prune", r, zoo.prune(base, r)) for r in rc.prune_rates]
        variants.append(("quantize", "int8", zoo.quantize_int8(base)))
        variants.append(("finetune", rc.finetune_iterations,
                         zoo.finetune(base, ft.inputs, ft.labels, rc.finetune_iterations, rc.finetune_lr,
                                      seed=run.stream(f"finetune-{e.id}").seed)))
        for kind, param, net in variants:
            s, acc = score(net)
            rows.append([e.id, kind, param, s, acc])
            if kind != "none":
                records.append({**asdict(e), "id": f"{e.id}+{kind}{param}",
                                "modifications": [{"op": kind, "param": param}], "path": "",
                                "metrics": {"test_accuracy": acc}})
    for e in pir[: rc.adv_models]:
        res = zoo.adversarial_train(models[e.id], zd.attacker_inputs, rc.adv_iterations, rc.adv_per_iter,
                                    rc.adv_learning_rate, zd.test, checkpoint_every=10,
                                    rng=run.stream(f"advtrain-{e.id}"))
        utility = dict(res.utility)
        for it, net in sorted(res.checkpoints.items()):
            s, _ = score(net)
            adv_rows.append([e.id, it, s, utility[it]])
        records.append({**asdict(e), "id": f"{e.id}+advtrain{rc.adv_iterations}",
                        "modifications": [{"op": "advtrain", "param": rc.adv_iterations}], "path": "",
                        "metrics": {"test_accuracy": utility[rc.adv_iterations]}})
    out = run.path("robustness")
    arts = [write_csv(out / "robustness.csv", ["model_id", "modification", "param", "mean_sim", "test_acc"], rows),
            write_csv(out / "advtrain.csv", ["model_id", "iterations", "mean_sim", "test_acc"], adv_rows)]
    nn.dump_json({"variants": records}, out / "variants.json")
    arts.append(out / "variants.json")
    arts.append(advtrain_summary(run, adv_rows))
    return arts


def advtrain_summary(run: Run, adv_rows):
    """Across-model mean similarity, its 30-iteration moving average and utility loss."""
    its = sorted({r[1] for r in adv_rows})
    sims = np.array([np.mean([r[2] for r in adv_rows if r[1] == it]) for it in its])
    accs = np.array([np.mean([r[3] for r in adv_rows if r[1] == it]) for it in its])
    step = its[1] - its[0] if len(its) > 1 else 1
    w = max(1, int(round(30 / step)))
    ma = [float(np.mean(sims[max(0, i - w + 1) : i + 1])) for i in range(len(its))]
    rows = [[it, float(s), m, float(a), float(accs[0] - a)] for it, s, m, a in zip(its, sims, ma, accs)]
    return write_csv(run.path("robustness", "advtrain_summary.csv"),
                     ["iterations", "mean_sim", "moving_avg_30", "test_acc", "utility_loss"], rows)


# -------------------------------------------------------------- report


def stage_report(run: Run):
    return report.emit_report(run.dir, run.path("report"))


STAGES = {
    "zoo": stage_zoo,
    "uap": stage_uap,
    "fingerprint": stage_fingerprint,
    "train-encoder": stage_train_encoder,
    "verify": stage_verify,
    "ablate": stage_ablate,
    "robustness": stage_robustness,
    "report": stage_report,
}


def run_stage(cfg: PipelineConfig, command: str, run: Run | None = None):
    """Run one command; returns the ReportBundle dict (artifacts, seconds, seed)."""
    if command not in STAGES:
        raise ValueError(f"unknown command {command!r}")
    run = run or Run(cfg)
    run.dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run.path("config.json"))
    t = time.time()
    try:
        arts = [Path(a) for a in STAGES[command](run)]
    except Exception as exc:
        run.record(command, [], time.time() - t, "failed", f"{type(exc).__name__}: {exc}")
        raise
    missing = [str(a) for a in arts if not a.exists()]
    if missing:
        raise StageError(f"stage {command} did not produce {missing}")
    seconds = time.time() - t
    run.record(command, arts, seconds)
    return {"command": command, "artifacts": [str(a) for a in arts], "seconds": seconds, "seed": cfg.seed,
            "run_dir": str(run.dir)}


def run_all(cfg: PipelineConfig, commands=tuple(STAGES)):
    run = Run(cfg)
    return run, [run_stage(cfg, c, run) for c in commands]
