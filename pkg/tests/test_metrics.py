import numpy as np
import pytest
import torch

from gausstok.metrics import EvalReport, evaluate, psnr, ssim
from gausstok.data import ImageDataset


def toy_images(n=3, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n, size, size, 3)).astype(np.float32)


class TestPSNR:
    def test_identical_images_hit_cap(self):
        img = toy_images(1)[0]
        assert psnr(img, img) == 99.0

    def test_uniform_error_is_20db(self):
        img = toy_images(1, seed=1)[0] * 0.5
        noisy = img + 0.1
        assert psnr(img, noisy) == pytest.approx(20.0, abs=1e-6)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (8, 8, 3))
        b = rng.uniform(0, 1, (8, 8, 3))
        total = 0.0
        for y in range(8):
            for x in range(8):
                for c in range(3):
                    total += (a[y, x, c] - b[y, x, c]) ** 2
        expected = 10 * np.log10(1.0 / (total / (8 * 8 * 3)))
        assert psnr(a, b) == pytest.approx(expected, abs=1e-6)

    def test_strictly_decreasing_in_noise_amplitude(self):
        img = toy_images(1, seed=3)[0] * 0.5 + 0.25
        values = [psnr(img, np.clip(img + amp, 0, 1)) for amp in (0.01, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_masked_psnr_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 1, (8, 8, 3))
        b = rng.uniform(0, 1, (8, 8, 3))
        mask2d = rng.random((8, 8)) > 0.5
        mask = np.broadcast_to(mask2d[..., None], a.shape)
        total, count = 0.0, 0
        for y in range(8):
            for x in range(8):
                if mask2d[y, x]:
                    for c in range(3):
                        total += (a[y, x, c] - b[y, x, c]) ** 2
                        count += 1
        expected = 10 * np.log10(1.0 / (total / count))
        assert psnr(a, b, mask=mask) == pytest.approx(expected, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


class TestSSIM:
    def test_identical_images_are_one(self):
        img = toy_images(1, size=16, seed=5)[0]
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self):
        a = toy_images(1, size=16, seed=6)[0]
        b = toy_images(1, size=16, seed=7)[0]
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_constant_offset_closed_form(self):
        # zero variances: SSIM = (2 mu1 mu2 + C1) / (mu1^2 + mu2^2 + C1)
        mu1, mu2 = 0.25, 0.75
        a = np.full((16, 16, 3), mu1)
        b = np.full((16, 16, 3), mu2)
        c1 = 0.01**2
        expected = (2 * mu1 * mu2 + c1) / (mu1**2 + mu2**2 + c1)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-10)

    def test_range(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            a = rng.uniform(0, 1, (16, 16, 3))
            b = rng.uniform(0, 1, (16, 16, 3))
            value = ssim(a, b)
            assert -1.0 <= value <= 1.0

    def test_small_images_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class _IdentityModel:
    """Pass-through harness stub: reconstruction equals the input."""

    def __init__(self, k=16):
        from gausstok.codebook import Codebook

        self.codebooks = {"vq": Codebook(entries=torch.zeros(k, 2))}
        self._k = k

    def __call__(self, images, quantize=True):
        from gausstok.nets import ModelOutput, TokenIndices

        b = images.shape[0]
        indices = TokenIndices(
            vq=torch.arange(b * 4).reshape(b, 4) % self._k,
            geo=None, feat=None, opacity=None,
        )
        return ModelOutput(
            recon=images.clone(), commitment=torch.zeros(()),
            f_vq=torch.zeros(b, 1, 1, 1), f_gs=torch.zeros(b, 1, 1, 1),
            indices=indices, ema_feeds={},
        )


class TestEvaluate:
    def test_identity_model_caps_metrics(self):
        images = toy_images(3, size=16, seed=9)
        dataset = ImageDataset(images, [f"i{k}" for k in range(3)], "val", 16)
        report = evaluate(_IdentityModel(), dataset)
        assert report.mean_psnr == 99.0
        assert report.mean_ssim == pytest.approx(1.0, abs=1e-12)
        assert report.image_count == 3

    def test_singleton_means_equal_entries(self):
        images = toy_images(1, size=16, seed=10)
        dataset = ImageDataset(images, ["only"], "val", 16)
        report = evaluate(_IdentityModel(), dataset)
        assert report.mean_psnr == report.psnr_values[0]
        assert report.mean_ssim == report.ssim_values[0]

    def test_repeated_evaluation_identical(self):
        images = toy_images(4, size=16, seed=11)
        dataset = ImageDataset(images, [f"i{k}" for k in range(4)], "val", 16)
        a = evaluate(_IdentityModel(), dataset)
        b = evaluate(_IdentityModel(), dataset)
        assert a.psnr_values == b.psnr_values
        assert a.ssim_values == b.ssim_values
        assert a.codebook_utilization == b.codebook_utilization

    def test_empty_dataset_rejected(self):
        dataset = ImageDataset(np.zeros((0, 16, 16, 3), dtype=np.float32), [], "val", 16)
        with pytest.raises(ValueError):
            evaluate(_IdentityModel(), dataset)

    def test_report_serializes_to_json_lines(self):
        report = EvalReport(
            psnr_values=[30.0], ssim_values=[0.9], mean_psnr=30.0, mean_ssim=0.9,
            codebook_utilization={"vq": 0.5}, image_count=1,
        )
        lines = report.to_json_lines().strip().split("\n")
        assert len(lines) == 2
        import json

        summary = json.loads(lines[0])
        assert summary["type"] == "eval_summary"
        assert summary["mean_psnr"] == 30.0
