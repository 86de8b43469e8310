import itertools
import warnings

import numpy as np
import pytest

from advclip import gradcore as gc
from advclip.data import AugmentConfig, DataError, ImageBatch
from advclip.detect import (
    AdapterHead, CalibrationError, DetectorConfig, DetectorState, FusionHead, PromptContext,
    adapter_forward, build_detector, build_prompts, calibrate_threshold, cross_entropy, detect,
    fuse_decisions, fusion_forward, logits, train_detector,
)
from advclip.gradcore import Tensor
from advclip.metrics import macro_f1
from advclip.optim import ScheduleConfig
from conftest import make_tiny_backbone
from gradcheck import numerical_grad


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestAdapter:
    def test_alpha_zero_is_identity(self):
        rng = np.random.default_rng(0)
        head = AdapterHead(8, 2, alpha=0.0, rng=rng)
        f = unit_rows(rng, 5, 8)
        np.testing.assert_allclose(adapter_forward(head, Tensor(f)).data, f, atol=1e-15)

    def test_zero_weights_half_alpha(self):
        head = AdapterHead(4, 2, alpha=0.5)
        head.W1.data[:] = 0
        head.W2.data[:] = 0
        f = unit_rows(np.random.default_rng(1), 3, 4)
        np.testing.assert_allclose(adapter_forward(head, Tensor(f), renormalize=False).data, 0.5 * f)
        np.testing.assert_allclose(adapter_forward(head, Tensor(f)).data, f, atol=1e-15)

    def test_identity_weights_worked_example(self):
        # d=2 with r=2 is not a bottleneck, so build the weights by hand
        head = AdapterHead(3, 2, alpha=0.5)
        head.W1 = Tensor(np.eye(2), requires_grad=True)
        head.W2 = Tensor(np.eye(2), requires_grad=True)
        f = Tensor([[1.0, -1.0]])
        raw = adapter_forward(head, f, renormalize=False).data
        np.testing.assert_allclose(raw, [[1.0, -0.5]])
        np.testing.assert_allclose(adapter_forward(head, f).data, [[1.0, -0.5]] / np.sqrt(1.25))

    def test_bottleneck_required(self):
        with pytest.raises(ValueError):
            AdapterHead(4, 4)

    def test_dim_mismatch(self):
        with pytest.raises(gc.DimensionError):
            adapter_forward(AdapterHead(8, 2), Tensor(np.ones((2, 7))))

    def test_alpha_zero_argmax_matches_zero_shot(self, tiny_backbone):
        state = build_detector("adapter", tiny_backbone, DetectorConfig(alpha=0.0))
        rng = np.random.default_rng(3)
        f = unit_rows(rng, 1000, tiny_backbone.dims.d)
        frozen = f @ state.fixed_text.data.T
        with gc.no_grad():
            adapted = state.forward_features(Tensor(f))["logits"][0].data
        assert np.array_equal(frozen.argmax(1), adapted.argmax(1))


class TestLogits:
    def test_orthonormal(self):
        w = np.eye(3)[:2]
        np.testing.assert_allclose(logits(Tensor(w[:1]), Tensor(w), 7.0).data, [[7.0, 0.0]])

    def test_zero_temperature_gives_ln2(self):
        rng = np.random.default_rng(0)
        lg = logits(Tensor(unit_rows(rng, 4, 5)), Tensor(unit_rows(rng, 2, 5)), 0.0)
        assert cross_entropy(lg, [0, 1, 1, 0]).item() == pytest.approx(np.log(2), abs=1e-15)

    def test_matches_dot_product(self):
        rng = np.random.default_rng(2)
        f, w = unit_rows(rng, 6, 5), unit_rows(rng, 2, 5)
        out = logits(Tensor(f), Tensor(w), 3.5).data
        for i, c in itertools.product(range(6), range(2)):
            assert out[i, c] == pytest.approx(3.5 * sum(f[i, k] * w[c, k] for k in range(5)), abs=1e-13)


class TestPrompts:
    def test_shape_and_norm(self, tiny_backbone):
        state = build_detector("prompt", tiny_backbone, DetectorConfig(n_ctx=4))
        w = build_prompts(state.prompt, tiny_backbone.text)
        assert w.shape == (2, tiny_backbone.dims.d)
        np.testing.assert_allclose(np.linalg.norm(w.data, axis=1), 1.0, atol=1e-12)

    def test_grad_reaches_context_only(self, tiny_backbone):
        state = build_detector("prompt", tiny_backbone, DetectorConfig(n_ctx=4))
        gc.sum(build_prompts(state.prompt, tiny_backbone.text)).backward()
        assert state.prompt.context.grad is not None and np.abs(state.prompt.context.grad).sum() > 0
        assert all(t.grad is None for t in tiny_backbone.named_tensors().values())

    def test_context_grad_matches_finite_difference(self, tiny_backbone):
        state = build_detector("prompt", tiny_backbone, DetectorConfig(n_ctx=3))
        rng = np.random.default_rng(5)
        f = unit_rows(rng, 6, tiny_backbone.dims.d)
        labels = np.array([0, 1, 0, 1, 1, 0])
        state.loss(Tensor(f), labels).backward()
        analytic = state.prompt.context.grad.copy()
        ctx = state.prompt.context.data

        def loss_at(arrs):
            state.prompt.context.data = arrs[0]
            with gc.no_grad():
                return state.loss(Tensor(f), labels).item()

        numeric = numerical_grad(loss_at, [ctx.copy()], 0)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)

    def test_overflow(self, tiny_backbone):
        with pytest.raises(ValueError, match="max_len"):
            state = build_detector("prompt", tiny_backbone, DetectorConfig(n_ctx=24))
            build_prompts(state.prompt, tiny_backbone.text)


class TestFusion:
    def setup_state(self, backbone, beta):
        return build_detector("fusion", backbone, DetectorConfig(beta=beta, n_ctx=4))

    def test_beta_one_zero_attention_is_adapter_path(self, tiny_backbone):
        state = self.setup_state(tiny_backbone, 1.0)
        for w in state.head.cross_attn():
            w.data[:] = 0
        f = unit_rows(np.random.default_rng(0), 5, tiny_backbone.dims.d)
        with gc.no_grad():
            out = fusion_forward(state.head, Tensor(f), tiny_backbone.text, state.fixed_text, tiny_backbone.temperature)
            solo = gc.softmax(logits(adapter_forward(state.head.adapter, Tensor(f)), state.fixed_text,
                                     tiny_backbone.temperature)).data
        np.testing.assert_allclose(out["p_fused"].data, solo, atol=1e-15)

    def test_beta_zero_is_prompt_path(self, tiny_backbone):
        state = self.setup_state(tiny_backbone, 0.0)
        f = unit_rows(np.random.default_rng(1), 5, tiny_backbone.dims.d)
        with gc.no_grad():
            out = fusion_forward(state.head, Tensor(f), tiny_backbone.text, state.fixed_text, tiny_backbone.temperature)
        np.testing.assert_array_equal(out["p_fused"].data, out["p_prompt"].data)

    def test_convex_and_normalized(self, tiny_backbone):
        state = self.setup_state(tiny_backbone, 0.3)
        f = unit_rows(np.random.default_rng(2), 20, tiny_backbone.dims.d)
        out = state.forward_features(Tensor(f))
        p, a, b = out["probs"].data, out["p_adapter"].data, out["p_prompt"].data
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
        assert np.all(p >= np.minimum(a, b) - 1e-15) and np.all(p <= np.maximum(a, b) + 1e-15)

    def test_fuse_decisions_rejects_bad_beta(self):
        with pytest.raises(ValueError):
            fuse_decisions(Tensor([[0.5, 0.5]]), Tensor([[0.5, 0.5]]), 1.5)


class TestParameterCounts:
    def test_counts(self, tiny_backbone):
        d, d_w = tiny_backbone.dims.d, tiny_backbone.dims.d_w
        assert build_detector("adapter", tiny_backbone).trainable_count() == 2 * d * (d // 4)
        assert build_detector("prompt", tiny_backbone, DetectorConfig(n_ctx=16)).trainable_count() == 16 * d_w
        fusion = build_detector("fusion", tiny_backbone, DetectorConfig(n_ctx=16))
        assert fusion.trainable_count() == 2 * d * (d // 4) + 16 * d_w + 3 * d * d

    def test_default_dims_prompt_count(self):
        bb = make_tiny_backbone(d=64, d_w=32, d_h=32, image_size=16, patch=8, max_len=32)
        assert build_detector("prompt", bb).trainable_count() == 512

    def test_ratio_invariant_at_wide_backbone(self):
        # the ratio bound needs a backbone well above ~1.5M parameters; see the ledger
        bb = make_tiny_backbone(d=64, d_w=32, d_h=640, image_size=64, patch=8, max_len=32)
        assert build_detector("fusion", bb).trainable_ratio() < 0.01
        assert build_detector("adapter", bb).trainable_ratio() < 0.01
        assert build_detector("prompt", bb).trainable_ratio() < 0.0005

    def test_unknown_mode(self, tiny_backbone):
        with pytest.raises(ValueError):
            build_detector("both", tiny_backbone)


def brute_force_best_f1(scores, labels):
    grid = np.unique(np.concatenate([np.linspace(-0.01, 1.01, 2000), scores, scores + 1e-9]))
    return max(macro_f1((scores >= t).astype(int), labels) for t in grid)


class TestCalibration:
    def test_separated(self):
        t, warn = calibrate_threshold([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert 0.2 < t <= 0.8 and warn is None
        assert macro_f1((np.array([0.1, 0.2, 0.8, 0.9]) >= t).astype(int), [0, 0, 1, 1]) == 1.0

    def test_all_equal(self):
        with pytest.warns(RuntimeWarning):
            t, warn = calibrate_threshold([0.3] * 4, [0, 1, 0, 1])
        assert t == 0.5 and warn

    def test_single_class(self):
        with pytest.raises(CalibrationError):
            calibrate_threshold([0.1, 0.2], [1, 1])

    def test_six_point_example_matches_brute_force(self):
        scores = np.array([0.15, 0.4, 0.35, 0.8, 0.55, 0.7])
        labels = np.array([0, 0, 1, 1, 0, 1])
        t, _ = calibrate_threshold(scores, labels)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert macro_f1((scores >= t).astype(int), labels) == pytest.approx(brute_force_best_f1(scores, labels))

    @pytest.mark.parametrize("seed", range(10))
    def test_random_vs_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 15))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 2)
        t, _ = calibrate_threshold(scores, labels)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = macro_f1((scores >= t).astype(int), labels)
            assert got == pytest.approx(brute_force_best_f1(scores, labels), abs=1e-12)

    def test_tie_takes_smallest(self):
        # thresholds 0.25 and 0.5 both split these perfectly; only one midpoint region
        t, _ = calibrate_threshold([0.1, 0.9], [0, 1])
        assert t == pytest.approx(0.5)


def toy_split(seed, n=24, size=16):
    rng = np.random.default_rng(seed)
    clean = np.broadcast_to(rng.uniform(0.3, 0.7, (n, 3, 1, 1)), (n, 3, size, size))
    adv = np.clip(clean + rng.choice([-0.25, 0.25], clean.shape), 0, 1)
    pixels = np.concatenate([clean, adv])
    labels = np.r_[np.zeros(n, int), np.ones(n, int)]
    return ImageBatch(pixels, labels, ids=[f"s{seed}-{i}" for i in range(2 * n)])


FAST = DetectorConfig(n_ctx=4, schedule=ScheduleConfig(epochs=2, base_lr=0.05), augment=AugmentConfig(enabled=False))


class TestTraining:
    @pytest.mark.parametrize("mode", ["adapter", "prompt", "fusion"])
    def test_backbone_hash_unchanged(self, tiny_backbone, mode):
        before = tiny_backbone.digest()
        state = train_detector(mode, tiny_backbone, toy_split(0), toy_split(1), FAST)
        assert tiny_backbone.digest() == before
        assert 0.0 <= state.threshold <= 1.0
        assert state.loss_curve and state.loss_curve[0][0] == 0

    def test_loss_logged_every_five_steps(self, tiny_backbone):
        state = train_detector("adapter", tiny_backbone, toy_split(0), toy_split(1), FAST)
        steps = [s for s, _ in state.loss_curve]
        assert steps == list(range(0, 6, 5))

    def test_only_context_moves_in_prompt_mode(self, tiny_backbone):
        state = build_detector("prompt", tiny_backbone, FAST)
        init = state.prompt.context.data.copy()
        trained = train_detector("prompt", tiny_backbone, toy_split(0), toy_split(1), FAST)
        assert not np.array_equal(init, trained.prompt.context.data)
        assert [p.shape for p in trained.trainable()] == [(4, tiny_backbone.dims.d_w)]

    def test_deterministic(self, tiny_backbone):
        cfg = DetectorConfig(n_ctx=4, schedule=ScheduleConfig(epochs=1))
        a = train_detector("fusion", tiny_backbone, toy_split(0), toy_split(1), cfg)
        b = train_detector("fusion", tiny_backbone, toy_split(0), toy_split(1), cfg)
        for k, v in a.named_tensors().items():
            assert np.array_equal(v, b.named_tensors()[k])

    def test_single_class_rejected(self, tiny_backbone):
        train = toy_split(0)
        with pytest.raises(DataError):
            train_detector("adapter", tiny_backbone, train.relabel(np.zeros(len(train), int)), toy_split(1), FAST)

    def test_learns_easy_task(self, tiny_backbone):
        cfg = DetectorConfig(n_ctx=4, schedule=ScheduleConfig(epochs=6, base_lr=0.5), augment=AugmentConfig(enabled=False))
        state = train_detector("adapter", tiny_backbone, toy_split(0, 64), toy_split(1), cfg)
        test = toy_split(2)
        verdicts = np.array(detect(state, test)["verdicts"]) == "adversarial"
        assert np.mean(verdicts == test.labels.astype(bool)) > 0.8


class TestDetect:
    def test_zero_threshold_all_adversarial(self, tiny_backbone):
        state = build_detector("adapter", tiny_backbone)
        state.threshold = 0.0
        assert set(detect(state, toy_split(0))["verdicts"]) == {"adversarial"}

    def test_duplicates(self, tiny_backbone):
        state = build_detector("fusion", tiny_backbone, DetectorConfig(n_ctx=4))
        x = toy_split(0).pixels[:3]
        out = detect(state, np.concatenate([x, x]))
        assert out["verdicts"][:3] == out["verdicts"][3:]
        assert out["confidence"][:3] == out["confidence"][3:]

    @pytest.mark.parametrize("mode", ["adapter", "prompt", "fusion"])
    def test_save_load_roundtrip(self, tiny_backbone, tmp_path, mode):
        state = build_detector(mode, tiny_backbone, DetectorConfig(n_ctx=4))
        state.threshold = 0.37
        state.save(tmp_path / "det.gct")
        back = DetectorState.load(tmp_path / "det.gct", tiny_backbone)
        x = toy_split(0).pixels
        assert back.threshold == 0.37 and back.mode == mode
        np.testing.assert_array_equal(back.predict_proba(x), state.predict_proba(x))

    def test_load_rejects_other_backbone(self, tiny_backbone, tmp_path):
        build_detector("adapter", tiny_backbone).save(tmp_path / "det.gct")
        with pytest.raises(ValueError, match="different backbone"):
            DetectorState.load(tmp_path / "det.gct", make_tiny_backbone(seed=9))
