"""Gradient-based L-infinity attacks and the toy victim classifier they target.

Update rules (all clip to the epsilon ball and to [0, 1]):

* FGSM   x' = x + eps * sign(grad)
* BIM    repeated FGSM steps of ``step_size`` with projection
* PGD    BIM from a uniform random start inside the ball
* RFGSM  random sign step of size ``a`` then one gradient step of ``eps - a``
* MIM    momentum on L1-normalised gradients, ``g = mu * g + grad / |grad|_1``
* DIM    MIM with gradients taken on randomly resized-and-padded copies
* TIM    MIM with gradients smoothed by a normalised Gaussian kernel
* TIPIM  targeted TI + DI + momentum toward a random other class
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .data import ImageBatch, normalize
from .gradcore import ConfigurationError, Tensor
from .optim import SGD

log = logging.getLogger(__name__)

ATTACKS = ("FGSM", "BIM", "PGD", "RFGSM", "MIM", "DIM", "TIM", "TIPIM")
ITERATIVE = {"BIM", "PGD", "MIM", "DIM", "TIM", "TIPIM"}
EPS_WEAK = 5 / 255
EPS_STRONG = 10 / 255


# ---------------------------------------------------------------------------
# victim


class VictimModel:
    """Patch MLP classifier: 8×8 patches -> hidden ReLU -> flattened -> K logits.

    Inputs are raw [0, 1] pixels; normalization happens inside ``forward`` so
    attack gradients are taken with respect to raw pixels.
    """

    def __init__(self, n_classes: int, image_size: int = 64, patch: int = 8, hidden: int = 32, seed: int = 17):
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.image_size = image_size
        self.patch = patch
        n_patches = (image_size // patch) ** 2
        d_in = 3 * patch * patch
        self.w1 = Tensor(rng.normal(0, np.sqrt(2 / d_in), (d_in, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0, np.sqrt(1 / (n_patches * hidden)), (n_patches * hidden, n_classes)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(n_classes), requires_grad=True)
        self.n_patches = n_patches
        self.hidden = hidden

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, pixels: Tensor) -> Tensor:
        n = pixels.shape[0]
        h = gc.patchify(normalize(pixels), self.patch)
        h = gc.relu(gc.add_bias(gc.matmul(h, self.w1), self.b1))
        h = gc.reshape(h, (n, self.n_patches * self.hidden))
        return gc.add_bias(gc.matmul(h, self.w2), self.b2)

    def predict(self, pixels: np.ndarray, batch: int = 256) -> np.ndarray:
        out = []
        with gc.no_grad():
            for i in range(0, len(pixels), batch):
                out.append(self.forward(Tensor(pixels[i:i + batch])).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, batch: ImageBatch) -> float:
        return float(np.mean(self.predict(batch.pixels) == batch.labels))

    def state(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1.data, "b1": self.b1.data, "w2": self.w2.data, "b2": self.b2.data}

    def load_state(self, state: dict[str, np.ndarray]):
        for k in ("w1", "b1", "w2", "b2"):
            getattr(self, k).data = np.array(state[k])


def train_victim(train: ImageBatch, n_classes: int, epochs: int = 12, lr: float = 0.05, batch: int = 32,
                 seed: int = 17) -> VictimModel:
    model = VictimModel(n_classes, train.pixels.shape[-1], seed=seed)
    opt = SGD(model.parameters(), momentum=0.9, weight_decay=1e-4)
    rng = np.random.default_rng(seed)
    steps = epochs * int(np.ceil(len(train) / batch))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            loss = gc.softmax_cross_entropy(model.forward(Tensor(train.pixels[idx])), train.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr * 0.5 * (1 + np.cos(np.pi * step / steps)))
            step += 1
    return model


# ---------------------------------------------------------------------------
# configuration and records


@dataclass
class AttackConfig:
    name: str
    epsilon: float = EPS_STRONG
    steps: int = 10
    step_size: float | None = None
    momentum_decay: float = 1.0
    kernel_size: int = 7
    diversity_prob: float = 0.5
    target_policy: str = "none"
    seed: int = 17
    rfgsm_alpha: float | None = None

    def __post_init__(self):
        self.name = self.name.upper()
        if self.step_size is None:
            self.step_size = 2 / 255 if self.name == "PGD" else self.epsilon / 4
        if self.name == "TIPIM" and self.target_policy == "none":
            self.target_policy = "random-other-class"

    def validate(self):
        if self.name not in ATTACKS:
            raise ConfigurationError(f"unknown attack {self.name!r}; expected one of {ATTACKS}")
        if not self.epsilon >= 0:
            raise ConfigurationError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.name in ITERATIVE:
            if self.steps < 1:
                raise ConfigurationError("iterative attacks need steps >= 1")
            if self.step_size * self.steps < self.epsilon - 1e-12:
                raise ConfigurationError(
                    f"{self.name}: step_size*steps = {self.step_size * self.steps:.5f} cannot reach eps {self.epsilon:.5f}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if not 0.0 <= self.diversity_prob <= 1.0:
            raise ConfigurationError("diversity_prob must lie in [0, 1]")
        if self.target_policy not in ("none", "random-other-class"):
            raise ConfigurationError(f"unknown target policy {self.target_policy!r}")
        if self.rfgsm_alpha is not None and not 0 <= self.rfgsm_alpha <= self.epsilon:
            raise ConfigurationError("rfgsm_alpha must lie in [0, epsilon]")
        return self


@dataclass
class AdversarialRecord:
    x_adv: ImageBatch
    source_ids: list[str]
    attack: str
    epsilon: float
    loss_before: np.ndarray
    loss_after: np.ndarray
    success: np.ndarray
    targets: np.ndarray | None = None
    loss_trace: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# helpers


def image_rng(seed: int, image_id: str, salt: str = "") -> np.random.Generator:
    """Independent stream per (seed, image id) so results do not depend on batching."""
    h = hashlib.sha256(f"{seed}:{image_id}:{salt}".encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def gaussian_kernel(size: int) -> np.ndarray:
    """Normalised Gaussian, sigma = size / 3."""
    if size == 1:
        return np.ones((1, 1))
    sigma = size / 3
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def per_image_loss(victim: VictimModel, pixels: np.ndarray, labels: np.ndarray) -> np.ndarray:
    with gc.no_grad():
        z = victim.forward(Tensor(pixels)).data
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def loss_grad(victim: VictimModel, pixels: np.ndarray, labels: np.ndarray, gather_index=None) -> np.ndarray:
    """Gradient of the summed cross-entropy w.r.t. raw pixels (optionally through a remap)."""
    x = Tensor(pixels, requires_grad=True)
    inp = x if gather_index is None else gc.spatial_gather(x, gather_index)
    loss = gc.softmax_cross_entropy(victim.forward(inp), labels)
    loss.backward()
    # undo the 1/N of the mean so per-image gradients do not depend on batch size
    return x.grad * len(labels)


def resize_pad_index(h: int, w: int, rng: np.random.Generator, low: float = 0.9) -> np.ndarray:
    """Flat-source index map: shrink to s in [low*H, H] (nearest) and pad at a random offset."""
    s = int(rng.integers(int(np.ceil(low * h)), h + 1))
    sw = max(1, int(round(s * w / h)))
    top = int(rng.integers(0, h - s + 1))
    left = int(rng.integers(0, w - sw + 1))
    src_r = np.floor((np.arange(s) + 0.5) * h / s).astype(np.int64)
    src_c = np.floor((np.arange(sw) + 0.5) * w / sw).astype(np.int64)
    index = np.full((h, w), -1, dtype=np.int64)
    index[top:top + s, left:left + sw] = src_r[:, None] * w + src_c[None, :]
    return index


def project(x_new: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_new, x0 - eps, x0 + eps), 0.0, 1.0)


def pick_targets(labels: np.ndarray, n_classes: int, ids, seed: int) -> np.ndarray:
    out = np.empty_like(labels)
    for i, (y, sid) in enumerate(zip(labels, ids)):
        r = image_rng(seed, sid, "target")
        t = int(r.integers(0, n_classes - 1))
        out[i] = t + (t >= y)
    return out


# ---------------------------------------------------------------------------
# attacks


def fgsm(x: ImageBatch, victim: VictimModel, cfg: AttackConfig) -> AdversarialRecord:
    cfg.validate()
    g = loss_grad(victim, x.pixels, x.labels)
    x_adv = np.clip(x.pixels + cfg.epsilon * np.sign(g), 0.0, 1.0)
    return _record(x, x_adv, victim, cfg)


def rfgsm(x: ImageBatch, victim: VictimModel, cfg: AttackConfig) -> AdversarialRecord:
    cfg.validate()
    a = cfg.epsilon / 2 if cfg.rfgsm_alpha is None else cfg.rfgsm_alpha
    noise = np.stack([image_rng(cfg.seed, sid, "rfgsm").standard_normal(x.pixels.shape[1:]) for sid in x.ids])
    x_tilde = np.clip(x.pixels + a * np.sign(noise), 0.0, 1.0)
    g = loss_grad(victim, x_tilde, x.labels)
    x_adv = project(x_tilde + (cfg.epsilon - a) * np.sign(g), x.pixels, cfg.epsilon)
    return _record(x, x_adv, victim, cfg)


def bim(x: ImageBatch, victim: VictimModel, cfg: AttackConfig) -> AdversarialRecord:
    return _iterate(x, victim, cfg, random_start=False, momentum=None)


def pgd(x: ImageBatch, victim: VictimModel, cfg: AttackConfig) -> AdversarialRecord:
    return _iterate(x, victim, cfg, random_start=True, momentum=None)


def mim(x: ImageBatch, victim: VictimModel, cfg: AttackConfig) -> AdversarialRecord:
    return _iterate(x, victim, cfg, momentum=cfg.momentum_decay)


def dim(x: ImageBatch, victim: VictimModel, cfg: AttackConfig) -> AdversarialRecord:
    return _iterate(x, victim, cfg, momentum=cfg.momentum_decay, diversity=cfg.diversity_prob)


def tim(x: ImageBatch, victim: VictimModel, cfg: AttackConfig) -> AdversarialRecord:
    return _iterate(x, victim, cfg, momentum=cfg.momentum_decay, kernel=gaussian_kernel(cfg.kernel_size))


def tipim(x: ImageBatch, victim: VictimModel, cfg: AttackConfig) -> AdversarialRecord:
    cfg = replace(cfg, target_policy="random-other-class")
    return _iterate(x, victim, cfg, momentum=cfg.momentum_decay, diversity=cfg.diversity_prob,
                    kernel=gaussian_kernel(cfg.kernel_size), targeted=True)


def _iterate(x: ImageBatch, victim: VictimModel, cfg: AttackConfig, *, random_start: bool = False,
             momentum: float | None = None, diversity: float = 0.0, kernel: np.ndarray | None = None,
             targeted: bool = False) -> AdversarialRecord:
    cfg.validate()
    x0 = x.pixels
    eps, a = cfg.epsilon, cfg.step_size
    labels = x.labels
    targets = None
    if targeted:
        targets = pick_targets(labels, victim.n_classes, x.ids, cfg.seed)
        if np.any(targets == labels):
            raise ConfigurationError("target class equals true class")
        labels = targets
    if random_start:
        delta = np.stack([image_rng(cfg.seed, sid, "pgd-init").uniform(-eps, eps, x0.shape[1:]) for sid in x.ids])
        xt = np.clip(x0 + delta, 0.0, 1.0)
    else:
        xt = x0.copy()
    rngs = [image_rng(cfg.seed, sid, "dim") for sid in x.ids] if diversity > 0 else None
    g_mom = np.zeros_like(x0)
    n, _, h, w = x0.shape
    trace = [per_image_loss(victim, xt, x.labels)]
    for _ in range(cfg.steps):
        index = None
        if rngs is not None:
            index = np.empty((n, h, w), dtype=np.int64)
            for i, r in enumerate(rngs):
                if r.random() < diversity:
                    index[i] = resize_pad_index(h, w, r)
                else:
                    index[i] = np.arange(h * w).reshape(h, w)
        grad = loss_grad(victim, xt, labels, index)
        if kernel is not None:
            grad = gc.conv2d_fixed(Tensor(grad), kernel).data
        if momentum is not None:
            l1 = np.abs(grad).reshape(n, -1).sum(axis=1).reshape(n, 1, 1, 1)
            # zero-gradient images leave the momentum buffer unchanged
            safe = np.where(l1 > 0, l1, 1.0)
            g_mom = momentum * g_mom + np.where(l1 > 0, grad / safe, 0.0)
            direction = np.sign(g_mom)
        else:
            direction = np.sign(grad)
        if targeted:
            direction = -direction
        xt = project(xt + a * direction, x0, eps)
        trace.append(per_image_loss(victim, xt, x.labels))
    rec = _record(x, xt, victim, cfg, targets)
    rec.loss_trace = trace
    return rec


def _record(x: ImageBatch, x_adv: np.ndarray, victim: VictimModel, cfg: AttackConfig,
            targets: np.ndarray | None = None) -> AdversarialRecord:
    before = per_image_loss(victim, x.pixels, x.labels)
    after = per_image_loss(victim, x_adv, x.labels)
    pred = victim.predict(x_adv)
    success = pred == targets if targets is not None else pred != x.labels
    ids = [f"{cfg.name}-{round(cfg.epsilon * 255)}-{sid}" for sid in x.ids]
    batch = ImageBatch(x_adv, x.labels.copy(), ids, [cfg.name] * len(x), np.full(len(x), cfg.epsilon), list(x.ids))
    return AdversarialRecord(batch, list(x.ids), cfg.name, cfg.epsilon, before, after, success, targets)


ATTACK_FNS = {"FGSM": fgsm, "BIM": bim, "PGD": pgd, "RFGSM": rfgsm, "MIM": mim, "DIM": dim, "TIM": tim,
              "TIPIM": tipim}


def run_attack(x: ImageBatch, victim: VictimModel, cfg: AttackConfig, batch: int = 128) -> AdversarialRecord:
    """Dispatch by name, processing ``batch`` images at a time."""
    fn = ATTACK_FNS[cfg.validate().name]
    parts = [fn(x.subset(np.arange(i, min(i + batch, len(x)))), victim, cfg) for i in range(0, len(x), batch)]
    if len(parts) == 1:
        return parts[0]
    trace = [np.concatenate(t) for t in zip(*[p.loss_trace for p in parts])] if parts[0].loss_trace else []
    return AdversarialRecord(
        ImageBatch.concat([p.x_adv for p in parts]), [s for p in parts for s in p.source_ids], cfg.name,
        cfg.epsilon, np.concatenate([p.loss_before for p in parts]), np.concatenate([p.loss_after for p in parts]),
        np.concatenate([p.success for p in parts]),
        None if parts[0].targets is None else np.concatenate([p.targets for p in parts]), trace)


# ---------------------------------------------------------------------------
# verification and corpus I/O


def verify_pixels(x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float, attack: str = "") -> dict:
    """Budget and pixel-range audit for raw arrays."""
    linf = float(np.max(np.abs(x_adv - x_orig))) if x_adv.size else 0.0
    report = {
        "attack": attack,
        "epsilon": epsilon,
        "n": len(x_adv),
        "linf": linf,
        "linf_ok": bool(linf <= epsilon + 1e-9),
        "range_ok": bool(x_adv.size == 0 or (x_adv.min() >= 0.0 and x_adv.max() <= 1.0)),
    }
    report["passed"] = report["linf_ok"] and report["range_ok"]
    return report


def verify_record(rec: AdversarialRecord, x_orig: np.ndarray, victim: VictimModel | None = None,
                  labels: np.ndarray | None = None) -> dict:
    """Re-check the budget, the pixel range and (optionally) the victim prediction change."""
    xa = rec.x_adv.pixels
    report = verify_pixels(xa, x_orig, rec.epsilon, rec.attack)
    if victim is not None and labels is not None:
        changed = victim.predict(xa) != victim.predict(x_orig)
        report["prediction_changed"] = float(np.mean(changed))
    return report


def save_corpus(directory, batches: list[ImageBatch]) -> Path:
    """One tensor container per (attack, epsilon) shard plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for b in batches:
        if not len(b):
            continue
        shard = f"{b.attack[0]}_{round(float(b.epsilon[0]) * 255)}.bin"
        gc.save_tensors(directory / shard, {"pixels": b.pixels})
        for row, (i, s, a, e, y) in enumerate(zip(b.ids, b.source_ids, b.attack, b.epsilon, b.labels)):
            index.append({"id": i, "source_id": s, "attack": a, "epsilon": float(e), "label": int(y),
                          "shard": shard, "row": row})
    (directory / "index.json").write_text(json.dumps(index, indent=1))
    return directory


def load_corpus(directory) -> list[ImageBatch]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    shards: dict[str, list[dict]] = {}
    for item in index:
        shards.setdefault(item["shard"], []).append(item)
    out = []
    for shard, items in shards.items():
        pixels = gc.load_tensors(directory / shard)[0]["pixels"]
        rows = [it["row"] for it in items]
        out.append(ImageBatch(pixels[rows], [it["label"] for it in items], [it["id"] for it in items],
                              [it["attack"] for it in items], np.array([it["epsilon"] for it in items]),
                              [it["source_id"] for it in items]))
    return out


def config_dict(cfg: AttackConfig) -> dict:
    return asdict(cfg)
