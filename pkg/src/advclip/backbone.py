"""Toy dual encoder, contrastively pretrained in-repo and then frozen.

The vision side embeds p×p patches, adds a learned per-position bias,
mean-pools, and runs two ReLU layers and a projection.  The text side
accepts raw token-embedding rows (so prompt tuning can inject free vectors),
adds positional embeddings, zero-pads to ``max_len``, and mixes the
flattened sequence through one ReLU layer and a projection.  Both outputs
are unit-norm rows.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .data import CorpusSpec, ImageBatch, generate_corpus, normalize
from .gradcore import Tensor
from .optim import Adam

log = logging.getLogger(__name__)

TEMPLATES = ("a photo of a {}", "a {} shape", "an image of a {}", "a rendering of a {}", "a clean photo of a {}")
NOISY_TEMPLATES = ("a noisy photo of a {}", "a grainy {} shape", "a noisy image of a {}", "a corrupted rendering of a {}",
                   "an adversarial photo of a {}")
DETECTOR_WORDS = ("clean", "adversarial", "face", "this", "image", "is", "corrupted", "by", "noise")


class PretrainingError(RuntimeError):
    def __init__(self, message: str, accuracy: float | None = None):
        super().__init__(message)
        self.accuracy = accuracy


class FrozenWeightsError(RuntimeError):
    pass


@dataclass
class BackboneDims:
    d: int = 64
    d_w: int = 32
    d_h: int = 128
    patch: int = 4
    max_len: int = 32
    image_size: int = 64


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(class_names, n_placeholders: int = 24) -> dict[str, int]:
    words: list[str] = []
    for t in TEMPLATES + NOISY_TEMPLATES:
        words += [w for w in tokenize(t) if w != "{}"]
    for name in class_names:
        words += tokenize(name)
    words += list(DETECTOR_WORDS)
    words += [f"[v{i}]" for i in range(1, n_placeholders + 1)]
    vocab: dict[str, int] = {}
    for w in words:
        vocab.setdefault(w, len(vocab))
    return vocab


def _init(rng, fan_in, shape):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)


class VisionEncoder:
    def __init__(self, dims: BackboneDims, rng: np.random.Generator):
        p, dh = dims.patch, dims.d_h
        self.dims = dims
        self.n_patches = (dims.image_size // p) ** 2
        self.patch_embed = _init(rng, 3 * p * p, (3 * p * p, dh))
        self.pos = Tensor(rng.normal(0.0, 0.02, (self.n_patches, dh)), requires_grad=True)
        self.w_h1 = _init(rng, dh, (dh, dh))
        self.b_h1 = Tensor(np.zeros(dh), requires_grad=True)
        self.w_h2 = _init(rng, dh, (dh, dh))
        self.b_h2 = Tensor(np.zeros(dh), requires_grad=True)
        self.proj = _init(rng, dh, (dh, dims.d))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"patch_embed": self.patch_embed, "pos": self.pos, "w_h1": self.w_h1, "b_h1": self.b_h1,
                "w_h2": self.w_h2, "b_h2": self.b_h2, "proj": self.proj}

    def __call__(self, pixels: Tensor) -> Tensor:
        n, _, h, w = pixels.shape
        if h != self.dims.image_size or w != self.dims.image_size:
            raise gc.DimensionError(f"vision encoder expects {self.dims.image_size}×{self.dims.image_size}, got {h}×{w}")
        x = gc.matmul(gc.patchify(normalize(pixels), self.dims.patch), self.patch_embed)
        x = gc.reshape(x, (n, self.n_patches * self.dims.d_h))
        x = gc.relu(gc.add_bias(x, gc.reshape(self.pos, (-1,))))
        x = gc.mean(gc.reshape(x, (n, self.n_patches, self.dims.d_h)), axis=1)
        x = gc.relu(gc.add_bias(gc.matmul(x, self.w_h1), self.b_h1))
        x = gc.relu(gc.add_bias(gc.matmul(x, self.w_h2), self.b_h2))
        return gc.l2_normalize(gc.matmul(x, self.proj))


class TextEncoder:
    def __init__(self, dims: BackboneDims, vocab: dict[str, int], rng: np.random.Generator):
        self.dims = dims
        self.vocab = dict(vocab)
        self.token_embedding = Tensor(rng.normal(0.0, 0.02 * np.sqrt(dims.d_w), (len(vocab), dims.d_w)) / np.sqrt(dims.d_w),
                                      requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.01, (dims.max_len, dims.d_w)), requires_grad=True)
        self.w_mix = _init(rng, dims.max_len * dims.d_w, (dims.max_len * dims.d_w, dims.d_h))
        self.b_mix = Tensor(np.zeros(dims.d_h), requires_grad=True)
        self.proj = _init(rng, dims.d_h, (dims.d_h, dims.d))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"token_embedding": self.token_embedding, "pos": self.pos, "w_mix": self.w_mix,
                "b_mix": self.b_mix, "proj": self.proj}

    def token_ids(self, text: str) -> list[int]:
        try:
            return [self.vocab[w] for w in tokenize(text)]
        except KeyError as exc:
            raise KeyError(f"word {exc.args[0]!r} not in the closed vocabulary") from None

    def embed(self, text: str) -> Tensor:
        return gc.embedding_lookup(self.token_embedding, self.token_ids(text))

    def _flat(self, emb: Tensor) -> Tensor:
        length = emb.shape[0]
        if length > self.dims.max_len:
            raise ValueError(f"sequence of {length} tokens exceeds max_len {self.dims.max_len}")
        pos = gc.embedding_lookup(self.pos, range(length))
        x = gc.pad_rows(gc.add(emb, pos), self.dims.max_len)
        return gc.reshape(x, (1, self.dims.max_len * self.dims.d_w))

    def encode_many(self, embeddings: list[Tensor]) -> Tensor:
        """Stack of unit-norm text features, one row per embedding sequence."""
        x = gc.concat([self._flat(e) for e in embeddings], axis=0)
        x = gc.relu(gc.add_bias(gc.matmul(x, self.w_mix), self.b_mix))
        return gc.l2_normalize(gc.matmul(x, self.proj))

    def encode_texts(self, texts: list[str]) -> Tensor:
        return self.encode_many([self.embed(t) for t in texts])


def encode_image(enc: VisionEncoder, x, batch: int = 256) -> Tensor:
    """Unit-norm image features; gradient-free when no input requires one."""
    if isinstance(x, ImageBatch):
        x = x.pixels
    if isinstance(x, Tensor):
        return enc(x)
    rows = [enc(Tensor(x[i:i + batch])).data for i in range(0, len(x), batch)]
    return Tensor(np.concatenate(rows) if rows else np.zeros((0, enc.dims.d)))


def encode_text(enc: TextEncoder, token_embeddings: Tensor) -> Tensor:
    """Unit-norm feature (shape d) for one sequence of L ≤ max_len embedding rows."""
    return gc.reshape(enc.encode_many([token_embeddings]), (enc.dims.d,))


@dataclass
class PretrainConfig:
    dims: BackboneDims = field(default_factory=BackboneDims)
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(n_per_class=160, seed=2017, id_prefix="bb"))
    heldout_per_class: int = 40
    epochs: int = 40
    batch_per_class: int = 4
    lr: float = 2e-3
    init_temperature: float = 10.0
    max_temperature: float = 100.0
    seed: int = 17
    gate: float = 0.90
    # captioned random corruptions give the embedding a natural-vs-noisy axis
    noise_prob: float = 0.5
    noise_range: tuple[float, float] = (0.02, 0.07)
    noise_kinds: tuple[str, ...] = ("gaussian", "sign", "smooth")


def corrupt(pixels: np.ndarray, rng: np.random.Generator, amplitude: float, kind: str) -> np.ndarray:
    """Random, non-adversarial corruption of one C×H×W image at the given L-inf scale."""
    if kind == "gaussian":
        noise = np.clip(rng.normal(0.0, 0.5, pixels.shape), -1, 1)
    elif kind == "sign":
        noise = rng.choice([-1.0, 1.0], size=pixels.shape)
    elif kind == "smooth":
        from .attacks import gaussian_kernel
        raw = rng.normal(0.0, 1.0, (1,) + pixels.shape)
        noise = gc.conv2d_fixed(Tensor(raw), gaussian_kernel(int(rng.choice([3, 5, 7])))).data[0]
        noise = noise / max(np.abs(noise).max(), 1e-12)
    else:
        raise ValueError(f"unknown corruption {kind!r}")
    return np.clip(pixels + amplitude * noise, 0.0, 1.0)

class BackboneCheckpoint:
    def __init__(self, vision: VisionEncoder, text: TextEncoder, dims: BackboneDims, class_names: list[str],
                 log_temperature: float, meta: dict | None = None):
        self.vision = vision
        self.text = text
        self.dims = dims
        self.class_names = list(class_names)
        self.log_temperature = float(log_temperature)
        self.meta = dict(meta or {})
        self.frozen = False

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature))

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"vision.{k}": v for k, v in self.vision.named_parameters().items()}
        out.update({f"text.{k}": v for k, v in self.text.named_parameters().items()})
        return out

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.named_tensors().values()))

    def freeze(self):
        for t in self.named_tensors().values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def digest(self) -> str:
        arrays = {k: t.data for k, t in self.named_tensors().items()}
        arrays["log_temperature"] = np.array(self.log_temperature)
        return gc.tensor_digest(arrays)

    def assert_unchanged(self, digest: str):
        if self.digest() != digest:
            raise FrozenWeightsError("frozen backbone weights were modified")

    def class_prompt(self, name: str, template: str = TEMPLATES[0]) -> str:
        return template.format(name)

    def zero_shot_features(self, template: str = TEMPLATES[0]) -> Tensor:
        with gc.no_grad():
            return self.text.encode_texts([self.class_prompt(c, template) for c in self.class_names])

    def zero_shot_predict(self, pixels: np.ndarray) -> np.ndarray:
        with gc.no_grad():
            f = encode_image(self.vision, pixels).data
        return (f @ self.zero_shot_features().data.T).argmax(axis=1)

    def save(self, path) -> dict:
        arrays = {k: t.data for k, t in self.named_tensors().items()}
        arrays["log_temperature"] = np.array(self.log_temperature)
        meta = {"kind": "backbone", "dims": asdict(self.dims), "vocab": self.text.vocab,
                "class_names": self.class_names, "frozen": self.frozen, "temperature": self.temperature}
        meta.update(self.meta)
        return gc.save_tensors(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "BackboneCheckpoint":
        arrays, meta = gc.load_tensors(path)
        dims = BackboneDims(**meta["dims"])
        rng = np.random.default_rng(0)
        vision = VisionEncoder(dims, rng)
        text = TextEncoder(dims, meta["vocab"], rng)
        for k, t in vision.named_parameters().items():
            t.data = arrays[f"vision.{k}"]
        for k, t in text.named_parameters().items():
            t.data = arrays[f"text.{k}"]
        extra = {k: v for k, v in meta.items()
                 if k not in ("kind", "dims", "vocab", "class_names", "frozen", "temperature", "tensors", "sha256")}
        ck = cls(vision, text, dims, meta["class_names"], float(np.asarray(arrays["log_temperature"]).reshape(-1)[0]), extra)
        if meta.get("frozen", True):
            ck.freeze()
        return ck


def _contrastive_loss(img: Tensor, txt: Tensor, labels: np.ndarray, log_tau: Tensor) -> Tensor:
    """Symmetric InfoNCE between a batch of images and the K class captions.

    image -> text is a K-way softmax over captions; text -> image spreads the
    target uniformly over the batch images of that class.
    """
    logits = gc.mul(gc.exp(log_tau), gc.matmul(img, gc.transpose(txt)))
    i2t = gc.softmax_cross_entropy(logits, labels)
    k = txt.shape[0]
    target = np.zeros((k, len(labels)))
    target[labels, np.arange(len(labels))] = 1.0
    present = target.sum(axis=1) > 0
    target[present] /= target[present].sum(axis=1, keepdims=True)
    logp = gc.log(gc.softmax(gc.transpose(logits)))
    t2i = gc.scale(gc.sum(gc.mul(logp, Tensor(target))), -1.0 / present.sum())
    return gc.scale(gc.add(i2t, t2i), 0.5)


def pretrain_contrastive(cfg: PretrainConfig | None = None, corpus: ImageBatch | None = None,
                         heldout: ImageBatch | None = None) -> BackboneCheckpoint:
    """Train both encoders from scratch, check the zero-shot gate, and freeze."""
    cfg = cfg or PretrainConfig()
    names = [c.name for c in cfg.corpus.classes]
    if len(names) < 4:
        raise ValueError(f"contrastive pretraining needs at least 4 classes, got {len(names)}")
    corpus = corpus if corpus is not None else generate_corpus(cfg.corpus)
    if len(set(corpus.labels.tolist())) < 2:
        raise ValueError("contrastive pretraining needs images from at least two classes")
    if heldout is None:
        spec = CorpusSpec(**{**asdict(cfg.corpus), "classes": cfg.corpus.classes,
                             "n_per_class": cfg.heldout_per_class, "seed": cfg.corpus.seed + 1,
                             "id_prefix": cfg.corpus.id_prefix + "-heldout"})
        heldout = generate_corpus(spec)

    rng = np.random.default_rng(cfg.seed)
    vocab = build_vocab(names)
    vision = VisionEncoder(cfg.dims, rng)
    text = TextEncoder(cfg.dims, vocab, rng)
    log_tau = Tensor(np.log(cfg.init_temperature), requires_grad=True)
    params = list(vision.named_parameters().values()) + list(text.named_parameters().values()) + [log_tau]
    opt = Adam(params, lr=cfg.lr)

    by_class = [np.flatnonzero(corpus.labels == k) for k in range(len(names))]
    n_batches = min(len(ix) for ix in by_class) // cfg.batch_per_class
    total = cfg.epochs * n_batches
    step = 0
    for epoch in range(cfg.epochs):
        perms = [rng.permutation(ix) for ix in by_class]
        for b in range(n_batches):
            idx = np.concatenate([p[b * cfg.batch_per_class:(b + 1) * cfg.batch_per_class] for p in perms])
            pixels = corpus.pixels[idx].copy()
            noisy = rng.random(len(idx)) < cfg.noise_prob
            for i in np.flatnonzero(noisy):
                kind = cfg.noise_kinds[int(rng.integers(len(cfg.noise_kinds)))]
                pixels[i] = corrupt(pixels[i], rng, rng.uniform(*cfg.noise_range), kind)
            t_clean = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
            t_noisy = NOISY_TEMPLATES[int(rng.integers(len(NOISY_TEMPLATES)))]
            captions = [t_clean.format(n) for n in names]
            if cfg.noise_prob > 0:
                captions += [t_noisy.format(n) for n in names]
            img = vision(Tensor(pixels))
            txt = text.encode_texts(captions)
            labels = corpus.labels[idx] + len(names) * noisy
            loss = _contrastive_loss(img, txt, labels, log_tau)
            opt.zero_grad()
            loss.backward()
            opt.step(cfg.lr * 0.5 * (1 + np.cos(np.pi * step / total)))
            log_tau.data = np.minimum(log_tau.data, np.log(cfg.max_temperature))
            step += 1
        log.debug("pretrain epoch %d loss %.4f", epoch, loss.item())

    ck = BackboneCheckpoint(vision, text, cfg.dims, names, float(log_tau.data),
                            {"pretrain_seed": cfg.seed, "corpus_hash": cfg.corpus.digest()})
    ck.freeze()
    acc = float(np.mean(ck.zero_shot_predict(heldout.pixels) == heldout.labels))
    ck.meta["zero_shot_accuracy"] = acc
    if acc < cfg.gate:
        raise PretrainingError(f"zero-shot accuracy {acc:.3f} below gate {cfg.gate:.2f}", acc)
    return ck


def alignment_gap(ck: BackboneCheckpoint, heldout: ImageBatch) -> tuple[float, float]:
    """(mean cosine to own class text, mean cosine to other class texts)."""
    with gc.no_grad():
        f = encode_image(ck.vision, heldout.pixels).data
    sims = f @ ck.zero_shot_features().data.T
    own = sims[np.arange(len(heldout)), heldout.labels]
    mask = np.ones_like(sims, dtype=bool)
    mask[np.arange(len(heldout)), heldout.labels] = False
    return float(own.mean()), float(sims[mask].mean())
