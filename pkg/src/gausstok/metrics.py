"""Reconstruction quality metrics and full-dataset evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .codebook import utilization
from .data import ImageDataset

PSNR_CAP_DB = 99.0
_ZERO_MSE = 1e-12

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(target: np.ndarray, recon: np.ndarray, peak: float = 1.0,
         mask: Optional[np.ndarray] = None) -> float:
    """10 * log10(peak^2 / MSE), capped at 99 dB for (near-)identical images.

    With a boolean mask, only the masked pixels enter the MSE.
    """
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {recon.shape}")
    err = (np.asarray(target, dtype=np.float64) - np.asarray(recon, dtype=np.float64)) ** 2
    if mask is not None:
        if not mask.any():
            return PSNR_CAP_DB
        err = err[mask]
    mse = float(err.mean())
    if mse < _ZERO_MSE:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _window_means(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode correlation via sliding windows (images are desk-scale)."""
    size = kernel.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(channel, (size, size))
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(target: np.ndarray, recon: np.ndarray) -> float:
    """Single-scale SSIM, 11x11 Gaussian window sigma 1.5, per channel averaged."""
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {recon.shape}")
    if target.shape[0] < SSIM_WINDOW or target.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    a = np.asarray(target, dtype=np.float64)
    b = np.asarray(recon, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _window_means(x, kernel)
        mu_y = _window_means(y, kernel)
        xx = _window_means(x * x, kernel) - mu_x**2
        yy = _window_means(y * y, kernel) - mu_y**2
        xy = _window_means(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        values.append(float((num / den).mean()))
    return float(np.mean(values))


@dataclass
class EvalReport:
    psnr_values: list[float]
    ssim_values: list[float]
    mean_psnr: float
    mean_ssim: float
    codebook_utilization: dict[str, float]
    image_count: int
    region_psnr: dict[str, float] = field(default_factory=dict)

    def to_json_lines(self) -> str:
        summary = {
            "type": "eval_summary",
            "image_count": self.image_count,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "utilization": {k: self.codebook_utilization[k]
                            for k in sorted(self.codebook_utilization)},
            "region_psnr": {k: self.region_psnr[k] for k in sorted(self.region_psnr)},
        }
        lines = [json.dumps(summary, sort_keys=True)]
        for i, (p, s) in enumerate(zip(self.psnr_values, self.ssim_values)):
            lines.append(json.dumps(
                {"type": "eval_image", "index": i, "psnr": p, "ssim": s}, sort_keys=True
            ))
        return "\n".join(lines) + "\n"


def _collect_indices(store: dict, tokens) -> None:
    pairs = [
        ("vq", tokens.vq), ("geo", tokens.geo), ("feat", tokens.feat),
        ("opacity", tokens.opacity), ("vq2", tokens.vq2),
    ]
    for name, idx in pairs:
        if idx is not None:
            store.setdefault(name, []).append(idx.reshape(-1))


def evaluate(model, dataset: ImageDataset, batch_size: int = 16) -> EvalReport:
    """Deterministic full-dataset pass: metrics plus per-codebook utilization.

    Never mutates model parameters or codebooks; reconstruction goes through
    the fully discrete tokenize/detokenize path.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    psnr_values: list[float] = []
    ssim_values: list[float] = []
    index_store: dict[str, list[torch.Tensor]] = {}
    masked_err: dict[str, list[float]] = {}

    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            stop = min(start + batch_size, len(dataset))
            images = torch.from_numpy(dataset.images[start:stop]).permute(0, 3, 1, 2)
            out = model(images, quantize=True)
            _collect_indices(index_store, out.indices)
            recon = out.recon.permute(0, 2, 3, 1).numpy()
            for i in range(stop - start):
                target = dataset.images[start + i]
                psnr_values.append(psnr(target, recon[i]))
                ssim_values.append(ssim(target, recon[i]))
                if dataset.masks is not None:
                    for kind, masks in dataset.masks.items():
                        m = masks[start + i]
                        if m.any():
                            masked_err.setdefault(kind, []).append(
                                psnr(target, recon[i], mask=np.broadcast_to(m[..., None], target.shape))
                            )

    utils = {
        name: utilization(model.codebooks[name], torch.cat(chunks))
        for name, chunks in index_store.items()
    }
    region = {kind: float(np.mean(vals)) for kind, vals in masked_err.items()}
    return EvalReport(
        psnr_values=psnr_values,
        ssim_values=ssim_values,
        mean_psnr=float(np.mean(psnr_values)),
        mean_ssim=float(np.mean(ssim_values)),
        codebook_utilization=utils,
        image_count=len(dataset),
        region_psnr=region,
    )
