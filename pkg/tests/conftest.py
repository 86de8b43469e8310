import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from advclip.backbone import BackboneCheckpoint, BackboneDims, TextEncoder, VisionEncoder, build_vocab  # noqa: E402

TINY_CLASSES = ["circle", "square", "triangle", "ring"]


def make_tiny_backbone(seed: int = 0, **dims) -> BackboneCheckpoint:
    """Randomly initialized, frozen backbone at small dims (no pretraining)."""
    kw = {"d": 16, "d_w": 8, "d_h": 24, "patch": 4, "max_len": 24, "image_size": 16}
    kw.update(dims)
    bd = BackboneDims(**kw)
    rng = np.random.default_rng(seed)
    vocab = build_vocab(TINY_CLASSES)
    ck = BackboneCheckpoint(VisionEncoder(bd, rng), TextEncoder(bd, vocab, rng), bd, TINY_CLASSES, np.log(10.0))
    return ck.freeze()


@pytest.fixture
def tiny_backbone():
    return make_tiny_backbone()


def tiny_experiment(out_dir, **over):
    """A complete pipeline configuration that runs in seconds (16 px, 4 classes)."""
    from advclip.data import DEFAULT_CLASSES, AugmentConfig, CorpusSpec
    from advclip.backbone import PretrainConfig
    from advclip.detect import DetectorConfig
    from advclip.harness import BaselineConfig, ExperimentConfig, PoolConfig, VictimConfig
    from advclip.optim import ScheduleConfig

    classes = DEFAULT_CLASSES[:4]
    cfg = ExperimentConfig(
        out_dir=str(out_dir),
        backbone=PretrainConfig(
            dims=BackboneDims(d=16, d_w=8, d_h=32, patch=4, max_len=24, image_size=16),
            corpus=CorpusSpec(n_per_class=16, classes=classes, image_size=16, seed=9, id_prefix="tb"),
            heldout_per_class=4, epochs=4, lr=5e-3, gate=0.0),
        victim=VictimConfig(corpus=CorpusSpec(n_per_class=16, classes=classes, image_size=16, seed=8, id_prefix="tv"),
                            epochs=3),
        pool=PoolConfig(train_clean=16, train_adv_single=16, train_adv_pooled=4, test_clean=8, test_adv=8,
                        val_fraction=0.25),
        detector=DetectorConfig(n_ctx=4, schedule=ScheduleConfig(epochs=2, batch_size=8, base_lr=0.05),
                                augment=AugmentConfig(blur_prob=0.0)),
        baseline=BaselineConfig(channels=(4, 8, 8, 8)),
    )
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
