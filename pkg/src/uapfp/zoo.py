"""The model population: victim, piracy (black-box extraction) and homologous models.

Also the post-hoc modifications an attacker may apply to a stolen model:
fine-tuning, pruning, int8 quantisation and adversarial training.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from . import nn
from .fingerprint import BlackBox
from .numcore import RandomStream, as_stream
from .uap import deepfool_batch

logger = logging.getLogger(__name__)

ZOO_SCHEMA_VERSION = 1
ROLES = ("victim", "piracy", "homologous")

# Small dense architecture families of varying depth, width and activation.  The victim's
# architecture never appears among the suspects.
ARCHITECTURES = {
    "arc_v": {"hidden": [128, 128], "activation": "elu", "dropout": 0.0},
    "arc_a": {"hidden": [64, 64], "activation": "relu", "dropout": 0.0},
    "arc_b": {"hidden": [64, 64, 64], "activation": "tanh", "dropout": 0.0},
    "arc_c": {"hidden": [128, 128, 128, 128], "activation": "relu", "dropout": 0.0},
}


# ----------------------------------------------------------------- config


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "idx"
    synth: dict = field(default_factory=lambda: asdict(datamod.SynthSpec()))
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    test_fraction: float = 0.2
    victim_fraction: float = 0.5
    attacker_extra: int = 6000  # extra unlabeled draws from the generator (synthetic only)
    seed: int = 1

    def validate(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError(f"data.source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "synthetic":
            datamod.SynthSpec(**self.synth).validate()
        elif not (self.images and self.labels):
            raise ValueError("data.images and data.labels are required for idx data")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("data.test_fraction must lie in (0, 1)")
        if self.attacker_extra < 0:
            raise ValueError("data.attacker_extra must be >= 0")


@dataclass
class ZooConfig:
    victim_arch: str = "arc_v"
    suspect_archs: list = field(default_factory=lambda: ["arc_a", "arc_b", "arc_c"])
    n_piracy: int = 6  # held-out (test) models per role
    n_homologous: int = 6
    n_piracy_train: int = 5  # models reserved for encoder training
    n_homologous_train: int = 5
    overlap_rate: float = 0.5
    train_overlap_rates: list = field(default_factory=lambda: [0.9, 0.0, 0.7, 0.3, 0.5])
    optimizers: list = field(default_factory=lambda: ["sgd", "adam", "rmsprop"])
    batch_sizes: list = field(default_factory=lambda: [64, 128, 256])
    epochs: int = 60
    extraction_epochs: int = 60
    schedule: str = "cosine"
    label_mode: str = "soft"

    def validate(self):
        if self.victim_arch not in ARCHITECTURES:
            raise ValueError(f"zoo.victim_arch: unknown architecture {self.victim_arch!r}")
        if not self.suspect_archs:
            raise ValueError("zoo.suspect_archs must not be empty")
        for a in self.suspect_archs:
            if a not in ARCHITECTURES:
                raise ValueError(f"zoo.suspect_archs: unknown architecture {a!r}")
        if self.victim_arch in self.suspect_archs:
            raise ValueError("zoo.suspect_archs must exclude the victim's architecture")
        for name in ("n_piracy", "n_homologous", "n_piracy_train", "n_homologous_train"):
            if getattr(self, name) < 0:
                raise ValueError(f"zoo.{name} must be >= 0")
        if not self.optimizers or not self.batch_sizes:
            raise ValueError("zoo.optimizers and zoo.batch_sizes must not be empty")
        if self.label_mode not in ("soft", "hard"):
            raise ValueError("zoo.label_mode must be 'soft' or 'hard'")
        if self.n_homologous_train and not self.train_overlap_rates:
            raise ValueError("zoo.train_overlap_rates must not be empty")
        for r in [self.overlap_rate, *self.train_overlap_rates]:
            datamod.SplitSpec(overlap_rate=r)


# ------------------------------------------------------------ data plumbing


@dataclass
class ZooData:
    train: datamod.Dataset
    test: datamod.Dataset
    victim: datamod.Dataset
    attacker_inputs: np.ndarray  # unlabeled
    split_seed: int


def load_zoo_data(cfg: DataConfig) -> ZooData:
    """Deterministically rebuild every dataset the zoo and pipeline need."""
    cfg.validate()
    rng = RandomStream(cfg.seed)
    if cfg.source == "synthetic":
        spec = datamod.SynthSpec(**cfg.synth)
        full = datamod.synth_generate(spec, rng.spawn(0), name="synthetic")
        train, test = datamod.stratified_holdout(full, cfg.test_fraction, rng.spawn(1))
    else:
        train = datamod.load_idx(cfg.images, cfg.labels)
        if cfg.test_images:
            test = datamod.load_idx(cfg.test_images, cfg.test_labels, n_classes=train.n_classes)
        else:
            train, test = datamod.stratified_holdout(train, cfg.test_fraction, rng.spawn(1))
    split_seed = rng.spawn(2).seed
    victim, _ = datamod.split_with_overlap(train, datamod.SplitSpec(cfg.victim_fraction, 0.0, split_seed))
    rest = datamod.complement(train, np.searchsorted(train.index, victim.index))
    attacker = rest.inputs
    if cfg.source == "synthetic" and cfg.attacker_extra:
        spec = datamod.SynthSpec(**cfg.synth)
        per_class = max(10, int(np.ceil(cfg.attacker_extra / spec.N)))
        extra_spec = datamod.SynthSpec(**{**cfg.synth, "points_per_class": per_class})
        # Same templates (rng.spawn(0)), fresh sample: the attacker's own natural data.
        extra = datamod.synth_generate(extra_spec, rng.spawn(0), sample_rng=rng.spawn(3))
        attacker = np.concatenate([attacker, extra.inputs[: cfg.attacker_extra]])
    return ZooData(train, test, victim, attacker, split_seed)


def homologous_data(zd: ZooData, overlap_rate: float, seed: int, victim_fraction=0.5) -> datamod.Dataset:
    """A fresh homologous training set sharing ``overlap_rate`` of the victim's points."""
    spec = datamod.SplitSpec(victim_fraction, overlap_rate, zd.split_seed, homologous_seed=seed)
    _, homo = datamod.split_with_overlap(zd.train, spec)
    return homo


# -------------------------------------------------------------- records


@dataclass
class ModelRecord:
    id: str
    role: str
    architecture_id: str
    seed: int
    optimizer: str
    batch_size: int
    split: str = ""  # "train" (encoder training) or "test"; empty for the victim
    overlap_rate: float | None = None
    extraction: dict | None = None
    modifications: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    path: str = ""
    status: str = "ok"
    error: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if (self.overlap_rate is not None) != (self.role == "homologous"):
            raise ValueError(f"{self.id}: overlap_rate is set exactly for homologous models")
        if (self.extraction is not None) != (self.role == "piracy"):
            raise ValueError(f"{self.id}: extraction config is set exactly for piracy models")


@dataclass
class ZooManifest:
    entries: list
    dataset: dict
    config: dict = field(default_factory=dict)
    schema_version: int = ZOO_SCHEMA_VERSION

    def __post_init__(self):
        victims = [e for e in self.entries if e.role == "victim"]
        if len(victims) != 1:
            raise ValueError(f"a zoo needs exactly one victim, found {len(victims)}")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("model ids must be unique")

    @property
    def victim(self) -> ModelRecord:
        return next(e for e in self.entries if e.role == "victim")

    def select(self, role=None, split=None, ok_only=True) -> list:
        return [
            e for e in self.entries
            if (role is None or e.role == role)
            and (split is None or e.split == split)
            and (not ok_only or e.status == "ok")
        ]

    def get(self, model_id) -> ModelRecord:
        for e in self.entries:
            if e.id == model_id:
                return e
        raise KeyError(model_id)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset": self.dataset,
            "config": self.config,
            "entries": [asdict(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, doc) -> "ZooManifest":
        if doc.get("schema_version") != ZOO_SCHEMA_VERSION:
            raise ValueError(f"unsupported zoo schema_version {doc.get('schema_version')!r}")
        return cls([ModelRecord(**e) for e in doc["entries"]], doc["dataset"], doc.get("config", {}))


def save_manifest(manifest: ZooManifest, path, check_files=True):
    path = Path(path)
    if check_files:
        missing = [e.path for e in manifest.entries if e.status == "ok" and not (path.parent / e.path).exists()]
        if missing:
            raise FileNotFoundError(f"manifest references missing model files: {missing}")
    nn.dump_json(manifest.to_dict(), path)


def load_manifest(path) -> ZooManifest:
    return ZooManifest.from_dict(json.loads(Path(path).read_text()))


def load_models(manifest: ZooManifest, directory) -> dict:
    return {e.id: nn.load_model(Path(directory) / e.path) for e in manifest.entries if e.status == "ok"}


def write_metrics_csv(manifest: ZooManifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "role", "arch", "test_acc", "recovery", "agreement"])
        for e in manifest.entries:
            m = e.metrics
            w.writerow([
                e.id, e.role, e.architecture_id,
                _fmt(m.get("test_accuracy")), _fmt(m.get("recovery_rate")), _fmt(m.get("agreement")),
            ])


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


# ---------------------------------------------------------------- metrics


def recovery_rate(suspect: nn.DenseNet, victim: nn.DenseNet, test: datamod.Dataset):
    """``(accuracy ratio suspect/victim, argmax agreement)`` on ``test``."""
    if suspect.input_dim != victim.input_dim or suspect.n_classes != victim.n_classes:
        raise ValueError("suspect and victim disagree on input/output dimensions")
    acc_v = nn.accuracy(victim, test.inputs, test.labels)
    if acc_v == 0:
        raise ValueError("victim accuracy is 0; recovery rate undefined")
    acc_s = nn.accuracy(suspect, test.inputs, test.labels)
    agree = float(np.mean(nn.predict(suspect, test.inputs) == nn.predict(victim, test.inputs)))
    return acc_s / acc_v, agree


# -------------------------------------------------------------- training


def _arch_net(arch_id, input_dim, n_classes, rng):
    a = ARCHITECTURES[arch_id]
    return nn.init_dense_net(input_dim, a["hidden"], n_classes, a["activation"], a["dropout"], rng)


def _draw_hparams(cfg: ZooConfig, rng: RandomStream):
    opt = cfg.optimizers[int(rng.integers(len(cfg.optimizers), 1)[0])]
    bs = cfg.batch_sizes[int(rng.integers(len(cfg.batch_sizes), 1)[0])]
    return opt, int(bs)


def train_classifier(arch_id, x, targets, optimizer, batch_size, epochs, seed, loss="hard_ce",
                     schedule="cosine", n_classes=None, callback=None):
    rng = RandomStream(seed)
    n_classes = n_classes or (targets.shape[1] if np.ndim(targets) == 2 else int(np.max(targets)) + 1)
    net = _arch_net(arch_id, x.shape[1], n_classes, rng.spawn(0))
    cfg = nn.TrainConfig(optimizer=optimizer, batch_size=batch_size, epochs=epochs, loss=loss,
                         seed=rng.spawn(1).seed, schedule=schedule)
    net, trace = nn.train(net, x, targets, cfg, callback=callback)
    return nn.snap_float32(net), trace


def extract_piracy(query, attacker_inputs, cfg: nn.TrainConfig, arch_id, label_mode="soft", seed=0,
                   n_classes=None, callback=None):
    """Knockoff extraction: label the attacker's data by querying once, then train.

    ``query`` must be a callable returning probability vectors; passing a
    model object is refused so parameters can never leak into the attack.
    Returns ``(piracy_net, n_queries, trace)``.
    """
    if isinstance(query, nn.DenseNet):
        raise TypeError("extract_piracy takes a black-box query function, not a model")
    x = np.asarray(attacker_inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("attacker data is empty")
    if label_mode not in ("soft", "hard"):
        raise ValueError(f"unknown label_mode {label_mode!r}")
    box = query if isinstance(query, BlackBox) else BlackBox(query)
    before = box.n_queries
    probs = box(x)
    n_queries = box.n_queries - before
    if label_mode == "hard":
        targets = np.eye(probs.shape[1])[np.argmax(probs, axis=1)]
        loss = "hard_ce"
    else:
        targets = probs
        loss = "soft_ce"
    rng = RandomStream(seed)
    net = _arch_net(arch_id, x.shape[1], n_classes or probs.shape[1], rng.spawn(0))
    tcfg = nn.TrainConfig(cfg.optimizer, cfg.learning_rate, cfg.batch_size, cfg.epochs, loss,
                          rng.spawn(1).seed, cfg.max_steps, cfg.schedule)
    net, trace = nn.train(net, x, targets, tcfg, callback=callback)
    return nn.snap_float32(net), n_queries, trace


def build_zoo(data_cfg: DataConfig, cfg: ZooConfig, seed: int, out_dir=None, zd: ZooData | None = None):
    """Train the victim, then homologous and piracy models; returns ``(manifest, models, data)``.

    Model ids: ``victim``, ``piracy-<split>-<i>``, ``homologous-<split>-<i>``.
    With ``out_dir`` every model is written as ``<id>.model.json`` plus
    ``zoo.json`` and ``zoo_metrics.csv``.
    """
    cfg.validate()
    zd = zd or load_zoo_data(data_cfg)
    master = RandomStream(seed)
    n_classes = zd.train.n_classes
    entries, models = [], {}

    vs = master.spawn(0)
    opt, bs = _draw_hparams(cfg, vs.spawn(0))
    victim_rec = ModelRecord("victim", "victim", cfg.victim_arch, vs.seed, opt, bs)
    victim, _ = train_classifier(cfg.victim_arch, zd.victim.inputs, zd.victim.labels, opt, bs, cfg.epochs,
                                 vs.spawn(1).seed, schedule=cfg.schedule, n_classes=n_classes)
    models["victim"] = victim
    entries.append(victim_rec)
    victim_api = BlackBox(victim)

    plan = []
    for split, n_p, n_h, base in (("train", cfg.n_piracy_train, cfg.n_homologous_train, 0),
                                  ("test", cfg.n_piracy, cfg.n_homologous, 500)):
        for i in range(n_p):
            plan.append(("piracy", split, i, base + i))
        for i in range(n_h):
            plan.append(("homologous", split, i, base + i))

    for role, split, i, slot in plan:
        ms = master.spawn((1 if role == "piracy" else 2) * 10_000 + slot)
        arch = cfg.suspect_archs[slot % len(cfg.suspect_archs)]
        opt, bs = _draw_hparams(cfg, ms.spawn(0))
        mid = f"{role}-{split}-{i:02d}"
        if role == "piracy":
            rec = ModelRecord(mid, role, arch, ms.seed, opt, bs, split,
                              extraction={"label_mode": cfg.label_mode, "epochs": cfg.extraction_epochs,
                                          "n_queries": 0})
        else:
            rate = cfg.train_overlap_rates[i % len(cfg.train_overlap_rates)] if split == "train" else cfg.overlap_rate
            rec = ModelRecord(mid, role, arch, ms.seed, opt, bs, split, overlap_rate=float(rate))
        try:
            if role == "piracy":
                tcfg = nn.TrainConfig(optimizer=opt, batch_size=bs, epochs=cfg.extraction_epochs,
                                      schedule=cfg.schedule)
                net, n_q, _ = extract_piracy(victim_api, zd.attacker_inputs, tcfg, arch, cfg.label_mode,
                                             ms.spawn(1).seed, n_classes)
                rec.extraction["n_queries"] = n_q
            else:
                hd = homologous_data(zd, rec.overlap_rate, ms.spawn(2).seed, data_cfg.victim_fraction)
                net, _ = train_classifier(arch, hd.inputs, hd.labels, opt, bs, cfg.epochs, ms.spawn(1).seed,
                                          schedule=cfg.schedule, n_classes=n_classes)
        except nn.TrainingDivergedError as exc:
            logger.error("training %s diverged: %s", mid, exc)
            rec.status, rec.error = "failed", str(exc)
            entries.append(rec)
            continue
        models[mid] = net
        entries.append(rec)

    for rec in entries:
        if rec.status != "ok":
            continue
        net = models[rec.id]
        rec.path = f"models/{rec.id}.model.json"
        rec.metrics["test_accuracy"] = nn.accuracy(net, zd.test.inputs, zd.test.labels)
        if rec.role != "victim":
            rec.metrics["recovery_rate"], rec.metrics["agreement"] = recovery_rate(net, victim, zd.test)
    dataset = {
        "name": zd.train.name,
        "seed": data_cfg.seed,
        "source": data_cfg.source,
        "victim_fraction": data_cfg.victim_fraction,
        "split_seed": zd.split_seed,
        "n_train": len(zd.train),
        "n_test": len(zd.test),
    }
    manifest = ZooManifest(entries, dataset, {"data": asdict(data_cfg), "zoo": asdict(cfg), "seed": seed})
    if out_dir is not None:
        save_zoo(manifest, models, out_dir)
    return manifest, models, zd


def save_zoo(manifest: ZooManifest, models: dict, out_dir):
    out_dir = Path(out_dir)
    for rec in manifest.entries:
        if rec.status == "ok":
            nn.save_model(models[rec.id], out_dir / rec.path)
    save_manifest(manifest, out_dir / "zoo.json")
    write_metrics_csv(manifest, out_dir / "zoo_metrics.csv")


# ---------------------------------------------------------- modifications


def finetune(model: nn.DenseNet, x, labels, iterations: int, learning_rate=1e-3, batch_size=64, seed=0):
    """``iterations`` SGD steps on labelled data; returns a modified copy."""
    if iterations < 1:
        raise ValueError("finetune needs iterations >= 1")
    labels = np.asarray(labels)
    steps_per_epoch = int(np.ceil(len(labels) / batch_size))
    cfg = nn.TrainConfig(optimizer="sgd", learning_rate=learning_rate, batch_size=batch_size,
                         epochs=int(np.ceil(iterations / steps_per_epoch)), seed=seed, max_steps=iterations)
    net, _ = nn.train(model, x, labels, cfg)
    return net


def prune(model: nn.DenseNet, rate: float) -> nn.DenseNet:
    """Global magnitude pruning: zero the ``rate`` fraction of smallest |w| (biases kept)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("pruning rate must lie in [0, 1)")
    out = model.copy()
    flat = np.concatenate([layer.weight.ravel() for layer in out.layers])
    k = int(round(rate * flat.size))
    if k == 0:
        return out
    order = np.argsort(np.abs(flat), kind="stable")
    mask = np.ones(flat.size, dtype=bool)
    mask[order[:k]] = False
    start = 0
    for layer in out.layers:
        size = layer.weight.size
        layer.weight = np.where(mask[start : start + size].reshape(layer.weight.shape), layer.weight, 0.0)
        start += size
    return out


def quantize_int8(model: nn.DenseNet) -> nn.DenseNet:
    """Per-tensor symmetric int8 weights (scale = max|w| / 127), dequantised for inference."""
    out = model.copy()
    for layer in out.layers:
        w = layer.weight
        if not np.all(np.isfinite(w)):
            raise ValueError("cannot quantise non-finite weights")
        scale = float(np.max(np.abs(w))) / 127.0
        if scale > 0:
            layer.weight = np.round(w / scale) * scale
    return out


@dataclass
class AdvTrainResult:
    model: nn.DenseNet
    checkpoints: dict  # iteration -> model copy
    utility: list  # (iteration, test accuracy)


def adversarial_train(model: nn.DenseNet, pool, iterations: int, per_iter=128, learning_rate=1e-3, test=None,
                      checkpoint_every=30, rng=None, overshoot=0.02, max_iter=50) -> AdvTrainResult:
    """DeepFool adversarial training.

    Each iteration samples ``per_iter`` pool points, crafts DeepFool
    examples on the current model, labels them with the input model's
    clean predictions and takes one Adam step.  Test accuracy and a model
    snapshot are recorded every ``checkpoint_every`` iterations.
    """
    if iterations < 1:
        raise ValueError("adversarial training needs iterations >= 1")
    rng = as_stream(rng)
    pool = np.asarray(pool, dtype=np.float64)
    clean_labels = nn.predict(model, pool)
    net = model.copy()
    params = list(net.params())
    opt = nn.Optimizer("adam", learning_rate, params)
    eye = np.eye(net.n_classes)
    checkpoints = {0: model.copy()}
    utility = []
    if test is not None:
        utility.append((0, nn.accuracy(net, test.inputs, test.labels)))
    for it in range(1, iterations + 1):
        idx = rng.spawn(it).choice(pool.shape[0], min(per_iter, pool.shape[0]))
        x = pool[idx]
        res = deepfool_batch(net, x, max_iter, overshoot)
        x_adv = np.clip(x + (1.0 + overshoot) * res.perturbation, 0.0, 1.0)
        grads = nn.param_gradients(net, x_adv, eye[clean_labels[idx]], "hard_ce")
        opt.step(params, [g for pair in zip(grads.weights, grads.biases) for g in pair])
        if not all(np.all(np.isfinite(p)) for p in params):
            raise nn.TrainingDivergedError(f"adversarial training diverged at iteration {it}", utility)
        if it % checkpoint_every == 0 or it == iterations:
            checkpoints[it] = nn.snap_float32(net)
            if test is not None:
                utility.append((it, nn.accuracy(net, test.inputs, test.labels)))
    return AdvTrainResult(nn.snap_float32(net), checkpoints, utility)
