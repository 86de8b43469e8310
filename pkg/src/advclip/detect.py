"""Detector heads on the frozen backbone: visual adapter, prompt tuning, fusion.

Label convention everywhere: 0 = clean, 1 = adversarial.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .backbone import BackboneCheckpoint, encode_image
from .data import AugmentConfig, DataError, ImageBatch, augment
from .gradcore import Tensor
from .metrics import confusion_matrix, macro_f1_from_confusion
from .optim import SGD, ScheduleConfig, lr_at

log = logging.getLogger(__name__)

MODES = ("adapter", "prompt", "fusion")
CLASS_NAMES = ("Clean", "Adversarial")
FIXED_TEMPLATE = "a photo of a {} face"


class CalibrationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# heads


class AdapterHead:
    """Bottleneck d -> r -> d with a fixed residual blend ``alpha``."""

    def __init__(self, d: int, r: int, alpha: float = 0.2, rng: np.random.Generator | None = None):
        if not r < d:
            raise ValueError(f"adapter bottleneck r={r} must be smaller than d={d}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        rng = rng or np.random.default_rng(0)
        self.W1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, r)), requires_grad=True)
        self.W2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(r), (r, d)), requires_grad=True)
        self.alpha = float(alpha)

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.W2]


def adapter_forward(head: AdapterHead, f: Tensor, renormalize: bool = True) -> Tensor:
    """f* = alpha * ReLU(f W1) W2 + (1 - alpha) f, re-normalized per row."""
    if f.shape[-1] != head.W1.shape[0]:
        raise gc.DimensionError(f"adapter expects feature dim {head.W1.shape[0]}, got {f.shape[-1]}")
    a = gc.matmul(gc.relu(gc.matmul(f, head.W1)), head.W2)
    blended = gc.add(gc.scale(a, head.alpha), gc.scale(f, 1.0 - head.alpha))
    return gc.l2_normalize(blended) if renormalize else blended


class PromptContext:
    """N_ctx learnable context rows shared by both class prompts."""

    def __init__(self, n_ctx: int, d_w: int, class_token_ids: list[list[int]],
                 class_names=CLASS_NAMES, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.context = Tensor(rng.normal(0.0, 0.02, (n_ctx, d_w)), requires_grad=True)
        self.class_names = tuple(class_names)
        self.class_token_ids = [list(ids) for ids in class_token_ids]

    @property
    def n_ctx(self) -> int:
        return self.context.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.context]


def build_prompts(pc: PromptContext, text_enc) -> Tensor:
    """[V]_1 ... [V]_N [CLASS] for each class, encoded to unit-norm rows (2×d)."""
    rows = []
    for ids in pc.class_token_ids:
        if pc.n_ctx + len(ids) > text_enc.dims.max_len:
            raise ValueError(f"prompt of {pc.n_ctx + len(ids)} tokens exceeds max_len {text_enc.dims.max_len}")
        cls_emb = gc.embedding_lookup(text_enc.token_embedding, ids)
        rows.append(gc.concat([pc.context, cls_emb], axis=0))
    return text_enc.encode_many(rows)


def logits(image_feats: Tensor, class_feats: Tensor, tau: float) -> Tensor:
    """tau * cosine, both sides assumed unit norm."""
    return gc.scale(gc.matmul(image_feats, gc.transpose(class_feats)), tau)


def cross_entropy(logit: Tensor, labels) -> Tensor:
    return gc.softmax_cross_entropy(logit, labels)


class FusionHead:
    def __init__(self, adapter: AdapterHead, prompt: PromptContext, d: int, beta: float = 0.5,
                 rng: np.random.Generator | None = None):
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        rng = rng or np.random.default_rng(0)
        self.adapter = adapter
        self.prompt = prompt
        self.Wq = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), requires_grad=True)
        self.Wk = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), requires_grad=True)
        self.Wv = Tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True)
        self.beta = float(beta)

    def cross_attn(self) -> list[Tensor]:
        return [self.Wq, self.Wk, self.Wv]

    def parameters(self) -> list[Tensor]:
        return self.adapter.parameters() + self.prompt.parameters() + self.cross_attn()


def fuse_decisions(p_a: Tensor, p_b: Tensor, beta: float) -> Tensor:
    """Convex combination beta * p_a + (1 - beta) * p_b."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return gc.add(gc.scale(p_a, beta), gc.scale(p_b, 1.0 - beta))


def fusion_forward(fh: FusionHead, f: Tensor, text_enc, fixed_text: Tensor, tau: float,
                   return_logits: bool = False) -> dict:
    """Both decision paths plus their convex combination.

    Path A: adapted image features attend over the two prompt-tuned class
    rows (single-head dot-product attention), are added back residually and
    renormalized, then scored against the fixed-template class features.
    Path B: the frozen image features scored against the prompt-tuned rows.
    """
    d = f.shape[1]
    w_prompt = build_prompts(fh.prompt, text_enc)
    f_adapted = adapter_forward(fh.adapter, f)
    q = gc.matmul(f_adapted, fh.Wq)
    k = gc.matmul(w_prompt, fh.Wk)
    v = gc.matmul(w_prompt, fh.Wv)
    attn = gc.softmax(gc.scale(gc.matmul(q, gc.transpose(k)), 1.0 / np.sqrt(d)))
    f_joint = gc.l2_normalize(gc.add(f_adapted, gc.matmul(attn, v)))
    logit_a = logits(f_joint, fixed_text, tau)
    logit_b = logits(f, w_prompt, tau)
    p_a = gc.softmax(logit_a)
    p_b = gc.softmax(logit_b)
    p_fused = fuse_decisions(p_a, p_b, fh.beta)
    out = {"p_adapter": p_a, "p_prompt": p_b, "p_fused": p_fused}
    if return_logits:
        out.update(logit_adapter=logit_a, logit_prompt=logit_b)
    return out


# ---------------------------------------------------------------------------
# state


@dataclass
class DetectorConfig:
    alpha: float = 0.2
    bottleneck: int | None = None  # default d // 4
    n_ctx: int = 16
    beta: float = 0.5
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


class DetectorState:
    def __init__(self, mode: str, backbone: BackboneCheckpoint, cfg: DetectorConfig, head):
        if mode not in MODES:
            raise ValueError(f"unknown detector mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.backbone = backbone
        self.cfg = cfg
        self.head = head
        self.threshold = 0.5
        self.loss_curve: list[tuple[int, float]] = []
        self.val_curve: list[tuple[int, float]] = []
        self.calibration_warning: str | None = None
        with gc.no_grad():
            self.fixed_text = backbone.text.encode_texts([FIXED_TEMPLATE.format(c) for c in CLASS_NAMES])

    # --- parameters
    def trainable(self) -> list[Tensor]:
        return self.head.parameters()

    def trainable_count(self) -> int:
        return int(sum(p.size for p in self.trainable()))

    def total_count(self) -> int:
        return self.backbone.parameter_count() + self.trainable_count()

    def trainable_ratio(self) -> float:
        return self.trainable_count() / self.total_count()

    @property
    def adapter(self) -> AdapterHead | None:
        if self.mode == "adapter":
            return self.head
        return self.head.adapter if self.mode == "fusion" else None

    @property
    def prompt(self) -> PromptContext | None:
        if self.mode == "prompt":
            return self.head
        return self.head.prompt if self.mode == "fusion" else None

    # --- forward
    def forward_features(self, f: Tensor) -> dict:
        tau = self.backbone.temperature
        text = self.backbone.text
        if self.mode == "adapter":
            lg = logits(adapter_forward(self.head, f), self.fixed_text, tau)
            return {"logits": [lg], "probs": gc.softmax(lg)}
        if self.mode == "prompt":
            lg = logits(f, build_prompts(self.head, text), tau)
            return {"logits": [lg], "probs": gc.softmax(lg)}
        out = fusion_forward(self.head, f, text, self.fixed_text, tau, return_logits=True)
        return {"logits": [out["logit_adapter"], out["logit_prompt"]], "probs": out["p_fused"],
                "p_adapter": out["p_adapter"], "p_prompt": out["p_prompt"]}

    def loss(self, f: Tensor, labels) -> Tensor:
        out = self.forward_features(f)
        total = None
        for lg in out["logits"]:
            term = cross_entropy(lg, labels)
            total = term if total is None else gc.add(total, term)
        if self.mode == "fusion":
            total = gc.add(total, gc.nll(out["probs"], labels))
        return total

    def scores_from_features(self, feats: np.ndarray, path: str = "probs") -> np.ndarray:
        with gc.no_grad():
            out = self.forward_features(Tensor(feats))
        return out[path].data[:, 1]

    def features(self, pixels: np.ndarray) -> np.ndarray:
        with gc.no_grad():
            return encode_image(self.backbone.vision, pixels).data

    def predict_proba(self, pixels: np.ndarray, path: str = "probs") -> np.ndarray:
        """P(adversarial) per image."""
        return self.scores_from_features(self.features(pixels), path)

    # --- persistence
    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        if self.adapter is not None:
            out["adapter.W1"] = self.adapter.W1.data
            out["adapter.W2"] = self.adapter.W2.data
        if self.prompt is not None:
            out["prompt.context"] = self.prompt.context.data
        if self.mode == "fusion":
            out.update({"attn.Wq": self.head.Wq.data, "attn.Wk": self.head.Wk.data, "attn.Wv": self.head.Wv.data})
        return out

    def manifest(self) -> dict:
        d = self.backbone.dims.d
        return {
            "kind": "detector",
            "mode": self.mode,
            "dims": asdict(self.backbone.dims),
            "alpha": self.cfg.alpha,
            "bottleneck": self.cfg.bottleneck or d // 4,
            "beta": self.cfg.beta,
            "n_ctx": self.cfg.n_ctx,
            "threshold": self.threshold,
            "backbone_sha256": self.backbone.digest(),
            "trainable_params": self.trainable_count(),
        }

    def save(self, path) -> dict:
        return gc.save_tensors(path, self.named_tensors(), self.manifest())

    @classmethod
    def load(cls, path, backbone: BackboneCheckpoint) -> "DetectorState":
        arrays, meta = gc.load_tensors(path)
        if meta.get("backbone_sha256") not in (None, backbone.digest()):
            raise ValueError("detector was trained on a different backbone checkpoint")
        cfg = DetectorConfig(alpha=meta["alpha"], bottleneck=meta["bottleneck"], n_ctx=meta["n_ctx"], beta=meta["beta"])
        state = build_detector(meta["mode"], backbone, cfg)
        for name, arr in arrays.items():
            group, key = name.split(".")
            target = {"adapter": state.adapter, "prompt": state.prompt, "attn": state.head}[group]
            getattr(target, key).data = arr
        state.threshold = float(meta["threshold"])
        return state


def _class_token_ids(backbone: BackboneCheckpoint) -> list[list[int]]:
    return [backbone.text.token_ids(c) for c in CLASS_NAMES]


def build_detector(mode: str, backbone: BackboneCheckpoint, cfg: DetectorConfig | None = None) -> DetectorState:
    cfg = cfg or DetectorConfig()
    if mode not in MODES:
        raise ValueError(f"unknown detector mode {mode!r}; expected one of {MODES}")
    rng = np.random.default_rng(cfg.schedule.seed)
    d, d_w = backbone.dims.d, backbone.dims.d_w
    r = cfg.bottleneck or d // 4
    if mode == "adapter":
        head = AdapterHead(d, r, cfg.alpha, rng)
    elif mode == "prompt":
        head = PromptContext(cfg.n_ctx, d_w, _class_token_ids(backbone), rng=rng)
    else:
        adapter = AdapterHead(d, r, cfg.alpha, rng)
        prompt = PromptContext(cfg.n_ctx, d_w, _class_token_ids(backbone), rng=rng)
        head = FusionHead(adapter, prompt, d, cfg.beta, rng)
    return DetectorState(mode, backbone, cfg, head)


# ---------------------------------------------------------------------------
# training, calibration, inference


def calibrate_threshold(scores, labels) -> tuple[float, str | None]:
    """Threshold on P(adversarial) maximizing macro-F1 (verdict: score >= t).

    Candidates are the midpoints of the sorted unique scores plus the
    sentinels 0 and 1; ties go to the smallest threshold.  Returns the
    threshold and a warning string (None when the fit is not degenerate).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise CalibrationError("threshold calibration needs both clean and adversarial validation samples")
    uniq = np.unique(scores)
    if len(uniq) == 1:
        msg = "all validation scores are equal; threshold defaults to 0.5"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return 0.5, msg
    candidates = np.concatenate([[0.0], (uniq[:-1] + uniq[1:]) / 2, [1.0]])
    order = np.argsort(scores)
    s_sorted, y_sorted = scores[order], labels[order]
    n_pos, n_neg = int(labels.sum()), int(len(labels) - labels.sum())
    # for each candidate: predicted-positive = scores >= t
    first = np.searchsorted(s_sorted, candidates, side="left")
    pos_below = np.concatenate([[0], np.cumsum(y_sorted)])[first]
    neg_below = first - pos_below
    tp, fn = n_pos - pos_below, pos_below
    fp, tn = n_neg - neg_below, neg_below
    f1_pos = np.divide(2 * tp, 2 * tp + fp + fn, out=np.zeros(len(candidates)), where=(2 * tp + fp + fn) > 0)
    f1_neg = np.divide(2 * tn, 2 * tn + fn + fp, out=np.zeros(len(candidates)), where=(2 * tn + fn + fp) > 0)
    macro = (f1_pos + f1_neg) / 2
    best = np.flatnonzero(macro >= macro.max() - 1e-15)
    return float(candidates[best[0]]), None


def train_detector(mode: str, backbone: BackboneCheckpoint, train: ImageBatch, val: ImageBatch,
                   cfg: DetectorConfig | None = None, eval_each_epoch: bool = False) -> DetectorState:
    """Fit one head with SGD + warmup/cosine, then calibrate on the validation split."""
    cfg = cfg or DetectorConfig()
    labels = np.asarray(train.labels)
    if set(labels.tolist()) != {0, 1}:
        raise DataError("detector training needs both clean (0) and adversarial (1) samples")
    digest = backbone.digest()
    state = build_detector(mode, backbone, cfg)
    sch = cfg.schedule
    params = state.trainable()
    opt = SGD(params, sch.momentum, sch.weight_decay)
    rng = np.random.default_rng(sch.seed)
    per_epoch = int(np.ceil(len(train) / sch.batch_size))
    total = per_epoch * sch.epochs
    warmup = per_epoch * sch.warmup_epochs
    val_feats = state.features(val.pixels) if eval_each_epoch else None
    step = 0
    for epoch in range(sch.epochs):
        feats = state.features(augment(train, cfg.augment, rng).pixels)
        order = rng.permutation(len(train))
        for i in range(0, len(order), sch.batch_size):
            idx = order[i:i + sch.batch_size]
            loss = state.loss(Tensor(feats[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, total, sch, warmup))
            if step % sch.log_every == 0:
                state.loss_curve.append((step, loss.item()))
            step += 1
        if val_feats is not None:
            s = state.scores_from_features(val_feats)
            t, _ = calibrate_threshold(s, val.labels)
            cm = confusion_matrix((s >= t).astype(int), val.labels)
            state.val_curve.append((epoch + 1, macro_f1_from_confusion(cm, warn=False)))
    backbone.assert_unchanged(digest)
    state.threshold, state.calibration_warning = calibrate_threshold(state.predict_proba(val.pixels), val.labels)
    return state


def detect(state: DetectorState, x) -> dict:
    pixels = x.pixels if isinstance(x, ImageBatch) else np.asarray(x)
    conf = state.predict_proba(pixels)
    verdicts = np.where(conf >= state.threshold, "adversarial", "clean")
    return {"verdicts": verdicts.tolist(), "confidence": conf.tolist()}
