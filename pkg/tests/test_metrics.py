import time

import numpy as np
import pytest

from framecast.metrics import PSNR_CAP_DB, interleaved_fps, measure_fps, psnr, ssim


class TestPsnr:
    def test_identical_capped(self):
        a = np.random.default_rng(0).random((16, 16, 3))
        assert psnr(a, a) == PSNR_CAP_DB == 99.0

    def test_unit_mse_is_zero_db(self):
        a = np.zeros((8, 8))
        b = np.ones((8, 8))
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_log_arithmetic(self):
        # MSE = 0.01 -> 20 dB
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((5, 4)))

    def test_inputs_not_mutated(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        sa, sb = a.copy(), b.copy()
        psnr(a, b)
        assert np.array_equal(a, sa) and np.array_equal(b, sb)


class TestSsim:
    def test_identical_is_one(self):
        a = np.random.default_rng(0).random((32, 32, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_dominated_by_stabilizers(self):
        # closed form: means 0 and 1, zero variance =>
        # ssim = C1*C2 / ((1 + C1) * C2) = C1 / (1 + C1) ~ 1e-4
        a = np.zeros((32, 32))
        b = np.ones((32, 32))
        c1 = 0.01**2
        expected = c1 / (1 + c1)
        v = ssim(a, b)
        assert v == pytest.approx(expected, rel=1e-9)
        assert v < 0.05

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((24, 24, 3)), rng.random((24, 24, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_range(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            v = ssim(rng.random((16, 16)), rng.random((16, 16)))
            assert -1.0 <= v <= 1.0

    def test_repeated_evaluation_identical(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == ssim(a, b)


def _stub_session(per_forward_s=0.010, steps=4):
    """Arithmetic oracle: each frame costs steps * per_forward_s of sleep."""

    def make():
        def step(n):
            for _ in range(n):
                time.sleep(per_forward_s * steps)
            return n

        return step

    return make


class TestMeasureFps:
    def test_stub_clock_arithmetic(self):
        # 4 steps x 10 ms -> 25 fps
        fps = measure_fps(_stub_session(0.010, 4), warmup=1, num_frames=10, trials=3)
        assert fps == pytest.approx(25.0, rel=0.10)

    def test_doubling_steps_halves_fps(self):
        fps4 = measure_fps(_stub_session(0.010, 4), warmup=1, num_frames=8, trials=3)
        fps8 = measure_fps(_stub_session(0.010, 8), warmup=1, num_frames=8, trials=3)
        assert fps4 / fps8 == pytest.approx(2.0, rel=0.15)

    def test_short_commit_detected(self):
        def make():
            def step(n):
                return n - 1

            return step

        with pytest.raises(RuntimeError, match="committed"):
            measure_fps(make, warmup=1, num_frames=4, trials=1)

    def test_warmup_required(self):
        with pytest.raises(ValueError):
            measure_fps(_stub_session(), warmup=0)

    def test_interleaved_returns_both_medians(self):
        fa, fb = interleaved_fps(_stub_session(0.005, 2), _stub_session(0.005, 4),
                                 warmup=1, num_frames=6, trials=3)
        assert fa / fb == pytest.approx(2.0, rel=0.2)
