"""Experiment orchestration: artifacts, the four runners, and report files.

A :class:`Lab` owns one output directory.  It builds (or reloads) the frozen
backbone, the victim classifier and the attack corpora on first use, and
memoizes every trained detector so the runners can share work.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .attacks import (
    ATTACKS, EPS_STRONG, EPS_WEAK, AttackConfig, VictimModel, load_corpus, run_attack, save_corpus,
    train_victim, verify_record,
)
from .backbone import BackboneCheckpoint, PretrainConfig, pretrain_contrastive
from .data import AugmentConfig, CorpusSpec, DatasetManifest, ImageBatch, assemble, augment, generate_corpus, normalize
from .detect import MODES, DetectorConfig, DetectorState, calibrate_threshold, train_detector
from .gradcore import Tensor
from .metrics import MetricsReport, confusion_matrix, macro_f1, macro_f1_from_confusion
from .optim import SGD, ScheduleConfig, lr_at, sgd_step

__all__ = [
    "ScheduleConfig", "lr_at", "sgd_step", "macro_f1", "MetricsReport", "ExperimentMatrix", "ExperimentConfig",
    "Lab", "MissingArtifactError", "run_detectability", "run_cross_matrix", "run_efficiency", "run_robustness",
]

log = logging.getLogger(__name__)


class MissingArtifactError(FileNotFoundError):
    pass


def eps_tag(eps: float) -> str:
    return f"eps{round(eps * 255)}"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class VictimConfig:
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(n_per_class=300, seed=101, id_prefix="vtr"))
    epochs: int = 20
    lr: float = 0.05
    batch: int = 32
    seed: int = 17


@dataclass
class PoolConfig:
    """Image counts for the detector datasets (clean sources and attack sources never overlap)."""

    train_clean: int = 480
    train_adv_single: int = 480   # per attack, single-attack training runs
    train_adv_pooled: int = 120   # per attack, all-attack training pool
    test_clean: int = 240
    test_adv: int = 240
    val_fraction: float = 0.1
    corpus_seed: int = 300


@dataclass
class BaselineConfig:
    channels: tuple[int, ...] = (24, 48, 96, 192)


@dataclass
class AttackSettings:
    names: tuple[str, ...] = ATTACKS
    epsilons: tuple[float, ...] = (EPS_WEAK, EPS_STRONG)
    steps: int = 10
    kernel_size: int = 7
    diversity_prob: float = 0.5
    momentum_decay: float = 1.0
    # per-attack field overrides, e.g. {"PGD": {"steps": 20}}
    per_attack: dict[str, dict] = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/desk"
    seed: int = 17
    backbone: PretrainConfig = field(default_factory=PretrainConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    attack: AttackSettings = field(default_factory=AttackSettings)
    pool: PoolConfig = field(default_factory=PoolConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    cross_modes: tuple[str, ...] = MODES
    robustness_mode: str = "fusion"
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    @property
    def attacks(self) -> tuple[str, ...]:
        return tuple(self.attack.names)

    @property
    def epsilons(self) -> tuple[float, ...]:
        return tuple(self.attack.epsilons)

    def to_json(self) -> dict:
        return _jsonable(asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def attack_config(self, name: str, eps: float) -> AttackConfig:
        a = self.attack
        kw = {"steps": a.steps, "kernel_size": a.kernel_size, "diversity_prob": a.diversity_prob,
              "momentum_decay": a.momentum_decay, "seed": self.seed}
        kw.update(a.per_attack.get(name.upper(), {}))
        return AttackConfig(name, eps, **kw)


def _jsonable(obj):
    if is_dataclass(obj):
        obj = asdict(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _section_digest(obj) -> str:
    return hashlib.sha256(json.dumps(_jsonable(obj), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# experiment matrix


@dataclass
class ExperimentMatrix:
    """rows = training attack, columns = test attack."""

    mode: str
    epsilon: float
    attacks: tuple[str, ...]
    cells: dict[tuple[str, str], MetricsReport] = field(default_factory=dict)

    def complete(self) -> bool:
        return all((r, c) in self.cells for r in self.attacks for c in self.attacks)

    def grid(self, metric: str = "accuracy") -> np.ndarray:
        return np.array([[getattr(self.cells[(r, c)], metric) for c in self.attacks] for r in self.attacks])

    def diagonal_dominance(self) -> int:
        """Rows whose diagonal cell is at least the row mean."""
        g = self.grid()
        return int(np.sum(np.diag(g) >= g.mean(axis=1)))

    def mean(self, metric: str = "accuracy") -> float:
        return float(self.grid(metric).mean())

    def rows(self) -> list[dict]:
        out = []
        for r in self.attacks:
            for c in self.attacks:
                m = self.cells[(r, c)]
                out.append({"train_attack": r, "test_attack": c, "epsilon": eps_tag(self.epsilon),
                            "accuracy": m.accuracy, "macro_f1": m.macro_f1,
                            "tn": m.confusion[0][0], "fp": m.confusion[0][1],
                            "fn": m.confusion[1][0], "tp": m.confusion[1][1]})
        return out


# ---------------------------------------------------------------------------
# baseline detector (end-to-end conv net, no frozen backbone)


class BaselineConvNet:
    """Four stride-2 3×3 conv blocks, global average pool, linear 2-way head."""

    def __init__(self, channels=(24, 48, 96, 192), seed: int = 17):
        rng = np.random.default_rng(seed)
        self.convs = []
        c_in = 3
        for c in channels:
            w = Tensor(rng.normal(0.0, np.sqrt(2.0 / (c_in * 9)), (c, c_in, 3, 3)), requires_grad=True)
            self.convs.append((w, Tensor(np.zeros(c), requires_grad=True)))
            c_in = c
        self.fc = Tensor(rng.normal(0.0, np.sqrt(1.0 / c_in), (c_in, 2)), requires_grad=True)
        self.fc_b = Tensor(np.zeros(2), requires_grad=True)
        self.threshold = 0.5

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.convs for t in pair] + [self.fc, self.fc_b]

    def trainable_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def forward(self, pixels: np.ndarray) -> Tensor:
        h = normalize(pixels)
        for w, b in self.convs:
            h = gc.relu(gc.conv2d(h, w, b, stride=2, pad=1))
        n, c = h.shape[:2]
        h = gc.mean(gc.reshape(h, (n, c, -1)), axis=2)
        return gc.add_bias(gc.matmul(h, self.fc), self.fc_b)

    def predict_proba(self, pixels: np.ndarray, batch: int = 128) -> np.ndarray:
        with gc.no_grad():
            parts = [gc.softmax(self.forward(pixels[i:i + batch])).data[:, 1] for i in range(0, len(pixels), batch)]
        return np.concatenate(parts)


def train_baseline(train: ImageBatch, val: ImageBatch, cfg: ExperimentConfig) -> tuple[BaselineConvNet, list, list]:
    sch = cfg.detector.schedule
    net = BaselineConvNet(cfg.baseline.channels, sch.seed)
    opt = SGD(net.parameters(), sch.momentum, sch.weight_decay)
    rng = np.random.default_rng(sch.seed)
    per_epoch = int(np.ceil(len(train) / sch.batch_size))
    total, warmup = per_epoch * sch.epochs, per_epoch * sch.warmup_epochs
    loss_curve, val_curve, step = [], [], 0
    for epoch in range(sch.epochs):
        pixels = augment(train, cfg.detector.augment, rng).pixels
        order = rng.permutation(len(train))
        for i in range(0, len(order), sch.batch_size):
            idx = order[i:i + sch.batch_size]
            loss = gc.softmax_cross_entropy(net.forward(pixels[idx]), train.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, total, sch, warmup))
            if step % sch.log_every == 0:
                loss_curve.append((step, loss.item()))
            step += 1
        s = net.predict_proba(val.pixels)
        t, _ = calibrate_threshold(s, val.labels)
        val_curve.append((epoch + 1, macro_f1_from_confusion(confusion_matrix((s >= t).astype(int), val.labels), warn=False)))
    net.threshold, _ = calibrate_threshold(net.predict_proba(val.pixels), val.labels)
    return net, loss_curve, val_curve


def epochs_to_converge(val_curve: list[tuple[int, float]], tol: float = 0.005) -> int:
    """First epoch whose validation macro-F1 is within ``tol`` of the best."""
    best = max(v for _, v in val_curve)
    return next(e for e, v in val_curve if v >= best - tol)


# ---------------------------------------------------------------------------
# lab


class Lab:
    def __init__(self, cfg: ExperimentConfig, reuse: bool = True, build: bool = True):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.reuse = reuse
        self.build = build
        self._backbone: BackboneCheckpoint | None = None
        self._victim: VictimModel | None = None
        self._sources: dict[str, ImageBatch] | None = None
        self._adv: dict[tuple, ImageBatch] = {}
        self._detectors: dict[tuple, DetectorState] = {}
        self.timings: dict[str, float] = {}
        self.audit: list[dict] = []

    # --- artifacts
    @property
    def artifacts(self) -> Path:
        return self.out / "artifacts"

    def _missing(self, path: Path, what: str, command: str):
        if not self.build:
            raise MissingArtifactError(f"{what} not found at {path}; run the '{command}' command with the same config first")

    def backbone(self) -> BackboneCheckpoint:
        if self._backbone is None:
            path = self.artifacts / f"backbone-{_section_digest(self.cfg.backbone)}.gct"
            if self.reuse and path.exists():
                self._backbone = BackboneCheckpoint.load(path)
            else:
                self._missing(path, "backbone checkpoint", "pretrain")
                t0 = time.perf_counter()
                self._backbone = pretrain_contrastive(self.cfg.backbone)
                self.timings["pretrain"] = time.perf_counter() - t0
                self._backbone.save(path)
        return self._backbone

    def victim(self) -> VictimModel:
        if self._victim is None:
            vc = self.cfg.victim
            path = self.artifacts / f"victim-{_section_digest(vc)}.gct"
            n_classes = vc.corpus.n_classes
            if self.reuse and path.exists():
                arrays, meta = gc.load_tensors(path)
                self._victim = VictimModel(n_classes, meta["image_size"], seed=vc.seed)
                self._victim.load_state(arrays)
            else:
                self._missing(path, "victim model", "gen-attacks")
                t0 = time.perf_counter()
                self._victim = train_victim(generate_corpus(vc.corpus), n_classes, vc.epochs, vc.lr, vc.batch, vc.seed)
                self.timings["victim"] = time.perf_counter() - t0
                gc.save_tensors(path, self._victim.state(), {"kind": "victim", "image_size": vc.corpus.image_size})
        return self._victim

    def _corpus(self, role: str, count: int, offset: int) -> ImageBatch:
        base = self.cfg.backbone.corpus
        k = base.n_classes
        spec = CorpusSpec(**{**asdict(base), "classes": base.classes, "n_per_class": -(-count // k),
                             "seed": self.cfg.pool.corpus_seed + offset, "id_prefix": role})
        return generate_corpus(spec)

    def sources(self) -> dict[str, ImageBatch]:
        """Four disjoint image sets: clean train/test and attack-source train/test."""
        if self._sources is None:
            p = self.cfg.pool
            n_src = max(p.train_adv_single, p.train_adv_pooled)
            self._sources = {
                "clean_train": self._corpus("ctr", p.train_clean, 1),
                "src_train": self._corpus("atr", n_src, 2),
                "clean_test": self._corpus("cte", p.test_clean, 3),
                "src_test": self._corpus("ate", p.test_adv, 4),
            }
        return self._sources

    def corpus_dir(self, split: str) -> Path:
        return self.out / "corpus" / f"{split}-{_section_digest([self.cfg.victim, self.cfg.pool, self.cfg.backbone.corpus, self.cfg.attack, self.cfg.seed])}"

    def adversarial(self, attack: str, eps: float, split: str) -> ImageBatch:
        key = (attack, round(eps * 255), split)
        if key in self._adv:
            return self._adv[key]
        directory = self.corpus_dir(split) / f"{attack}_{round(eps * 255)}"
        src = self.sources()[f"src_{split}"]
        if self.reuse and (directory / "index.json").exists():
            batch = load_corpus(directory)[0]
        else:
            self._missing(directory, f"{attack} corpus at {eps_tag(eps)}", "gen-attacks")
            t0 = time.perf_counter()
            rec = run_attack(src, self.victim(), self.cfg.attack_config(attack, eps))
            self.timings[f"attack/{split}/{attack}/{eps_tag(eps)}"] = time.perf_counter() - t0
            report = verify_record(rec, src.pixels)
            report.update(split=split, success_rate=float(np.mean(rec.success)))
            self.audit.append(report)
            batch = rec.x_adv
            save_corpus(directory, [batch])
        if len(self._adv) >= 12:
            self._adv.pop(next(iter(self._adv)))
        self._adv[key] = batch
        return batch

    def generate_all(self):
        for eps in self.cfg.epsilons:
            for a in self.cfg.attacks:
                for split in ("train", "test"):
                    self.adversarial(a, eps, split)

    # --- datasets
    def training_pool(self, attacks: tuple[str, ...], eps: float) -> dict[str, ImageBatch]:
        p = self.cfg.pool
        per = p.train_adv_single if len(attacks) == 1 else p.train_adv_pooled
        manifest = DatasetManifest(p.train_clean, {a: per for a in attacks}, 0, 0, p.val_fraction, self.cfg.seed)
        adv = ImageBatch.concat([self.adversarial(a, eps, "train") for a in attacks])
        return assemble(manifest, self.sources()["clean_train"], adv)

    def test_set(self, attack: str, eps: float) -> ImageBatch:
        """Held-out clean images plus one attack's held-out adversarial images, labelled 0/1."""
        p = self.cfg.pool
        rng = np.random.default_rng(self.cfg.seed)
        clean = self.sources()["clean_test"]
        adv = self.adversarial(attack, eps, "test")
        clean = clean.subset(np.sort(rng.permutation(len(clean))[:p.test_clean]))
        adv = adv.subset(np.sort(rng.permutation(len(adv))[:p.test_adv]))
        return ImageBatch.concat([clean.relabel(np.zeros(len(clean), int)), adv.relabel(np.ones(len(adv), int))])

    # --- detectors
    def detector(self, mode: str, attacks: tuple[str, ...], eps: float, eval_each_epoch: bool = False) -> DetectorState:
        key = (mode, tuple(attacks), round(eps * 255))
        cached = self._detectors.get(key)
        if cached is not None and (cached.val_curve or not eval_each_epoch):
            return cached
        pool = self.training_pool(tuple(attacks), eps)
        t0 = time.perf_counter()
        state = train_detector(mode, self.backbone(), pool["train"], pool["val"], self.cfg.detector, eval_each_epoch)
        self.timings[f"train/{mode}/{'+'.join(attacks) if len(attacks) < 8 else 'all'}/{eps_tag(eps)}"] = \
            time.perf_counter() - t0
        self._detectors[key] = state
        self._write_loss_curve(f"{mode}_{'all' if len(attacks) == len(self.cfg.attacks) and len(attacks) > 1 else '+'.join(attacks)}_{eps_tag(eps)}",
                               state.loss_curve)
        return state

    def evaluate(self, state, attack: str, eps: float) -> MetricsReport:
        test = self.test_set(attack, eps)
        preds = (state.predict_proba(test.pixels) >= state.threshold).astype(int)
        return MetricsReport.from_predictions(preds, test.labels)

    # --- reports
    @property
    def reports(self) -> Path:
        return self.out / "reports"

    def _write_loss_curve(self, name: str, curve):
        path = self.reports / "loss_curves" / f"{name}.csv"
        write_csv(path, [{"step": s, "loss": v} for s, v in curve], ["step", "loss"])

    def write_manifest(self, extra: dict | None = None) -> Path:
        artifacts = {}
        if self._backbone is not None:
            artifacts["backbone_sha256"] = self._backbone.digest()
        report_hashes = {}
        if self.reports.exists():
            for p in sorted(self.reports.rglob("*.csv")):
                report_hashes[str(p.relative_to(self.reports))] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {
            "config": self.cfg.to_json(),
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.seed,
            "versions": {"python": platform.python_version(), "numpy": np.__version__},
            "artifacts": artifacts,
            "reports": report_hashes,
            "attack_audit": self.audit,
            "timings_seconds": self.timings,
        }
        manifest.update(extra or {})
        path = self.out / "run_manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    path.write_text(buf.getvalue())
    return path


def write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True))
    return path


MATRIX_COLUMNS = ["train_attack", "test_attack", "epsilon", "accuracy", "macro_f1", "tn", "fp", "fn", "tp"]


def _require(lab: Lab):
    if not lab.cfg.attacks:
        raise MissingArtifactError("no attacks configured; set attacks to a non-empty list")


# ---------------------------------------------------------------------------
# runners


def run_detectability(lab: Lab, eps: float = EPS_STRONG, modes: tuple[str, ...] = MODES) -> dict[str, dict[str, MetricsReport]]:
    """Each mode trained once on the all-attack pool, scored per attack type."""
    _require(lab)
    attacks = tuple(lab.cfg.attacks)
    table: dict[str, dict[str, MetricsReport]] = {}
    rows = []
    for mode in modes:
        state = lab.detector(mode, attacks, eps)
        table[mode] = {}
        for a in attacks:
            m = lab.evaluate(state, a, eps)
            m.loss_curve = list(state.loss_curve)
            table[mode][a] = m
            rows.append({"method": mode, "test_attack": a, "epsilon": eps_tag(eps), "accuracy": m.accuracy,
                         "macro_f1": m.macro_f1})
    write_csv(lab.reports / f"detectability_{eps_tag(eps)}.csv", rows,
              ["method", "test_attack", "epsilon", "accuracy", "macro_f1"])
    write_json(lab.reports / f"detectability_{eps_tag(eps)}.json",
               {mode: {a: m.to_json() for a, m in t.items()} for mode, t in table.items()})
    return table


def run_cross_matrix(lab: Lab, mode: str = "fusion", eps: float = EPS_STRONG) -> ExperimentMatrix:
    """One training run per attack, each scored on every attack type."""
    _require(lab)
    attacks = tuple(lab.cfg.attacks)
    mat = ExperimentMatrix(mode, eps, attacks)
    for train_a in attacks:
        state = lab.detector(mode, (train_a,), eps)
        for test_a in attacks:
            mat.cells[(train_a, test_a)] = lab.evaluate(state, test_a, eps)
    name = f"cross_matrix_{mode}_{eps_tag(eps)}"
    write_csv(lab.reports / f"{name}.csv", mat.rows(), MATRIX_COLUMNS)
    write_json(lab.reports / f"{name}.json", {"mode": mode, "epsilon": eps, "attacks": attacks,
                                              "diagonal_dominant_rows": mat.diagonal_dominance(), "cells": mat.rows()})
    return mat


def run_robustness(lab: Lab, mode: str | None = None) -> dict[float, ExperimentMatrix]:
    """The cross matrix at the weak and the strong budget, plus the mean-accuracy gap."""
    mode = mode or lab.cfg.robustness_mode
    grids = {eps: run_cross_matrix(lab, mode, eps) for eps in (EPS_WEAK, EPS_STRONG)}
    rows = []
    for eps, mat in grids.items():
        for r in mat.rows():
            rows.append({"condition": "weak" if eps == EPS_WEAK else "strong", **r})
    write_csv(lab.reports / f"robustness_{mode}.csv", rows, ["condition"] + MATRIX_COLUMNS)
    gap = grids[EPS_STRONG].mean() - grids[EPS_WEAK].mean()
    write_json(lab.reports / f"robustness_{mode}.json", {
        "mode": mode,
        "mean_accuracy": {eps_tag(e): m.mean() for e, m in grids.items()},
        "mean_macro_f1": {eps_tag(e): m.mean("macro_f1") for e, m in grids.items()},
        "strong_minus_weak_accuracy": gap,
    })
    return grids


def run_efficiency(lab: Lab, eps: float = EPS_STRONG) -> list[dict]:
    """Parameter counts, convergence and accuracy of the three heads against an end-to-end conv baseline."""
    _require(lab)
    attacks = tuple(lab.cfg.attacks)
    rows = []
    pool = lab.training_pool(attacks, eps)
    net, loss_curve, val_curve = train_baseline(pool["train"], pool["val"], lab.cfg)
    lab._write_loss_curve(f"baseline_all_{eps_tag(eps)}", loss_curve)
    accs, f1s = [], []
    for a in attacks:
        test = lab.test_set(a, eps)
        preds = (net.predict_proba(test.pixels) >= net.threshold).astype(int)
        m = MetricsReport.from_predictions(preds, test.labels)
        accs.append(m.accuracy)
        f1s.append(m.macro_f1)
    n = net.trainable_count()
    rows.append({"method": "baseline", "total_params": n, "trainable_params": n, "trainable_ratio": 1.0,
                 "configured_epochs": lab.cfg.detector.schedule.epochs,
                 "epochs_to_converge": epochs_to_converge(val_curve),
                 "accuracy": float(np.mean(accs)), "macro_f1": float(np.mean(f1s))})
    for mode in MODES:
        state = lab.detector(mode, attacks, eps, eval_each_epoch=True)
        ms = [lab.evaluate(state, a, eps) for a in attacks]
        rows.append({"method": mode, "total_params": state.total_count(), "trainable_params": state.trainable_count(),
                     "trainable_ratio": state.trainable_ratio(),
                     "configured_epochs": lab.cfg.detector.schedule.epochs,
                     "epochs_to_converge": epochs_to_converge(state.val_curve),
                     "accuracy": float(np.mean([m.accuracy for m in ms])),
                     "macro_f1": float(np.mean([m.macro_f1 for m in ms]))})
    write_csv(lab.reports / "efficiency.csv", rows, list(rows[0]))
    write_json(lab.reports / "efficiency.json", {
        "rows": rows, "baseline_val_curve": val_curve,
        "baseline_to_fusion_param_ratio": rows[0]["trainable_params"] / rows[-1]["trainable_params"],
    })
    return rows


def run_all(lab: Lab) -> dict:
    """Every runner once; returns the in-memory results."""
    lab.generate_all()
    out = {"detectability": run_detectability(lab)}
    out["cross"] = {mode: run_cross_matrix(lab, mode, EPS_STRONG) for mode in lab.cfg.cross_modes}
    out["robustness"] = run_robustness(lab)
    out["efficiency"] = run_efficiency(lab)
    lab.write_manifest()
    return out
