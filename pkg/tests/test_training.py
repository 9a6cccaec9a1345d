import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from memetector import training as tr
from memetector.checkpoint import PreprocessStats
from memetector.model import TOY_CONFIG
from memetector.training import ScheduleConfig, TrainConfig


class TestSchedule:
    def test_boundary(self):
        total = 1000
        t_w = tr.warmup_steps(total)
        assert t_w == 100
        assert tr.lr_at(t_w - 1, total) == pytest.approx(1e-3, abs=1e-12)
        assert tr.lr_at(t_w, total) == pytest.approx(1e-3, abs=1e-12)

    def test_warmup_is_linear_and_nonzero(self):
        assert tr.lr_at(0, 1000) == pytest.approx(1e-5)
        assert tr.lr_at(49, 1000) == pytest.approx(5e-4)

    def test_decay_value(self):
        # 1e-3 / (1 + 5e-5 * 1000 * 1.001**1000) evaluated with 30-digit arithmetic
        total = 20_000
        t = tr.warmup_steps(total) + 1000
        assert tr.lr_at(t, total) == pytest.approx(8.80400887886916e-4, abs=1e-12)

    def test_global_t_alternative(self):
        sched = ScheduleConfig(global_t=True)
        total = 1000
        assert tr.lr_at(100, total, sched) == pytest.approx(1e-3 / (1 + 5e-5 * 100 * 1.001 ** 100))

    def test_strictly_decreasing_after_warmup(self):
        total = 11_112
        t_w = tr.warmup_steps(total)
        lrs = np.array([tr.lr_at(t, total) for t in range(t_w, total)])
        assert np.all(np.diff(lrs) < 0)


class TestStats:
    def test_black_images(self):
        s = tr.compute_channel_stats([np.zeros((4, 4, 3), np.uint8)] * 2, 4, 4)
        np.testing.assert_array_equal(s.mean, 0)
        np.testing.assert_allclose(s.std, 1e-6)

    def test_half_gray(self):
        s = tr.compute_channel_stats([np.full((4, 4, 3), 127.5, np.float64).astype(np.uint8)], 4, 4)
        np.testing.assert_allclose(s.mean, 127 / 255)

    def test_black_and_white(self):
        s = tr.compute_channel_stats([np.zeros((4, 4, 3), np.uint8), np.full((4, 4, 3), 255, np.uint8)], 4, 4)
        np.testing.assert_allclose(s.mean, 0.5)
        np.testing.assert_allclose(s.std, 0.5)

    def test_empty(self):
        with pytest.raises(ValueError):
            tr.compute_channel_stats([], 4, 4)


class TestPreprocess:
    stats = PreprocessStats([0.5] * 3, [0.5] * 3)

    def test_white_pixel(self):
        out = tr.preprocess(np.full((2, 2, 3), 255, np.uint8), self.stats, 2, 2)
        np.testing.assert_allclose(out, 1.0)

    def test_mean_pixel_maps_to_zero(self):
        stats = PreprocessStats([0.2, 0.4, 0.6], [0.3, 0.3, 0.3])
        img = np.tile(np.array([51, 102, 153], np.uint8), (3, 3, 1))
        np.testing.assert_allclose(tr.preprocess(img, stats, 3, 3), 0.0, atol=1e-6)

    def test_resize(self):
        assert tr.preprocess(np.zeros((500, 500, 3), np.uint8), self.stats).shape == (250, 250, 3)

    def test_grayscale_rejected(self, tmp_path):
        with pytest.raises(tr.UnsupportedImage):
            tr.preprocess(np.zeros((10, 10), np.uint8), self.stats, 10, 10)
        Image.fromarray(np.zeros((5, 5), np.uint8), mode="L").save(tmp_path / "g.png")
        with pytest.raises(tr.UnsupportedImage):
            tr.load_rgb(tmp_path / "g.png")


class TestAdamW:
    def test_zero_grads_no_decay(self):
        theta = {"w": np.array([1.0, -2.0])}
        tr.adamw_step(theta, {"w": np.zeros(2)}, tr.OptimizerState(), lr=1e-2, weight_decay=0.0)
        np.testing.assert_array_equal(theta["w"], [1.0, -2.0])

    def test_zero_grads_pure_shrink(self):
        theta = {"w": np.array([1.0, -2.0, 0.5])}
        state = tr.OptimizerState()
        for _ in range(3):
            before = theta["w"].copy()
            tr.adamw_step(theta, {"w": np.zeros(3)}, state, lr=1e-2, weight_decay=1e-1)
            np.testing.assert_allclose(theta["w"], before * (1 - 1e-3))
            assert np.all(np.abs(theta["w"]) < np.abs(before))

    def test_quadratic_bowl(self):
        def reference(theta, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
            m = v = 0.0
            for t in range(1, steps + 1):
                g = theta
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            return theta

        theta = {"w": np.array([1.0])}
        state = tr.OptimizerState()
        for _ in range(200):
            tr.adamw_step(theta, {"w": theta["w"].copy()}, state, lr=1e-2, weight_decay=0.0)
        expected = reference(1.0, 200, 1e-2)
        assert abs(expected) < 0.1
        assert theta["w"][0] == pytest.approx(expected, abs=1e-12)


def toy_sets(n=24, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.standard_normal((n, 10, 10, 3)).astype(np.float32)
    images[labels == 1, :2] += 2.0  # bright top rows mark the positive class
    return tr.ArrayDataset(images, labels)


class TestTrain:
    def test_iterations_per_epoch(self):
        assert tr.iterations_per_epoch(100, 64) == 2
        assert tr.iterations_per_epoch(128, 64) == 2
        assert tr.iterations_per_epoch(129, 64) == 3

    def test_deterministic_rerun(self):
        cfg = TrainConfig(epochs=3, batch_size=8, seed=7)
        a = tr.train(cfg, TOY_CONFIG, toy_sets(), toy_sets(8, 1))
        b = tr.train(cfg, TOY_CONFIG, toy_sets(), toy_sets(8, 1))
        assert a.losses == b.losses
        assert len(a.losses) == 3 * 3
        assert [m.epoch for m in a.metrics] == [1, 2, 3]

    def test_first_loss_near_ln2(self):
        res = tr.train(TrainConfig(epochs=1, batch_size=64, seed=0), TOY_CONFIG, toy_sets(64), toy_sets(8, 1))
        assert abs(res.losses[0] - math.log(2)) < 0.15

    def test_max_iters_and_metrics_log(self, tmp_path):
        path = tmp_path / "metrics.csv"
        res = tr.train(TrainConfig(epochs=50, batch_size=8, seed=0, max_iters=7), TOY_CONFIG,
                       toy_sets(), toy_sets(8, 1), metrics_path=path)
        assert len(res.losses) == 7
        assert tr.read_metrics(path) == res.metrics
        assert 0.0 <= res.best.val_accuracy <= 1.0

    def test_best_checkpoint_ties_keep_earliest(self):
        res = tr.train(TrainConfig(epochs=4, batch_size=8, seed=0), TOY_CONFIG, toy_sets(), toy_sets(8, 1))
        accs = [m.val_accuracy for m in res.metrics]
        assert res.best.epoch == accs.index(max(accs)) + 1

    def test_variant_follows_train_config(self):
        res = tr.train(TrainConfig(epochs=1, batch_size=8, variant="vit"), TOY_CONFIG, toy_sets(), toy_sets(8, 1))
        assert res.best.config.variant == "vit"


class TestConfigFile:
    def test_round_trip(self):
        cfg = TrainConfig(epochs=3, batch_size=16, seed=5, variant="vit", max_iters=10,
                          schedule=ScheduleConfig(peak_lr=5e-4, global_t=True))
        model = TOY_CONFIG.replace(variant="vit")
        again_cfg, again_model = tr.parse_config_text(tr.format_config(cfg, model))
        assert again_cfg == cfg
        assert again_model == model

    def test_fraction_and_unknown_key(self):
        cfg, _ = tr.parse_config_text("decay = 1e-3/20\n# comment\n")
        assert cfg.schedule.decay == pytest.approx(5e-5)
        with pytest.raises(ValueError):
            tr.parse_config_text("bogus = 1")



@given(st.integers(10, 200_000), st.data())
def test_schedule_shape(total, data):
    t_w = tr.warmup_steps(total)
    t = data.draw(st.integers(0, total - 1))
    lr = tr.lr_at(t, total)
    assert 0 < lr <= 1e-3 + 1e-15
    if 0 < t < t_w:
        assert tr.lr_at(t - 1, total) < lr
    if t > t_w:
        assert tr.lr_at(t - 1, total) > lr
