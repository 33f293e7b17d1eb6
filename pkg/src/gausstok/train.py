"""Loss functions, optimizer, and the end-to-end training loop.

The loop is: dual-branch tokenize -> fuse -> decode -> loss -> backward -> clip
-> adaptive-moment step -> EMA codebook update -> dead-entry revival. The
adversarial weight is held at zero for a warmup period, then ramped linearly.
Seeded runs are bitwise reproducible, including across checkpoint resume.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .codebook import ema_update, reinit_dead_entries, utilization
from .data import ImageDataset
from .nets import (
    EncoderDecoderConfig,
    ModelConfig,
    PatchDiscriminator,
    TokenizerModel,
    get_extractor,
)


class NumericError(RuntimeError):
    """A loss component left the finite range; names the offending component."""


@dataclass
class TrainConfig:
    """All hyperparameters of a run. Every field is addressable in config files."""

    # data / shapes
    resolution: int = 32
    downsample_factor: int = 4
    channels: int = 8
    base_width: int = 64
    res_blocks: int = 2
    split_ratio: float = 0.8
    # loss weights
    gamma: float = 0.1              # adversarial
    eta: float = 1.0                # perceptual
    beta: float = 0.25              # commitment
    # optimization
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 10
    max_steps: int = 0              # 0 = run all epochs
    adversarial_warmup_steps: int = 1000
    grad_clip: float = 1.0
    # tokenizer structure
    num_gaussians: int = 1
    fusion_mode: str = "hadamard"
    branch_mode: str = "vq_gs"
    refine_steps: int = 1
    per_gaussian_features: bool = False
    # codebooks
    k_vq: int = 1024
    k_geo: int = 1024
    k_feat: int = 1024
    k_opacity: int = 16
    ema_decay: float = 0.99
    stale_threshold: int = 256
    # misc
    perceptual_extractor: str = "random-multiscale"
    disc_base_width: int = 32
    checkpoint_every_epochs: int = 1
    seed: int = 42

    def __post_init__(self):
        if self.gamma < 0 or self.eta < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.adversarial_warmup_steps < 0:
            raise ValueError("warmup must be nonnegative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            trunk=EncoderDecoderConfig(
                input_resolution=self.resolution,
                downsample_factor=self.downsample_factor,
                channels=self.channels,
                base_width=self.base_width,
                res_blocks=self.res_blocks,
            ),
            num_gaussians=self.num_gaussians,
            fusion_mode=self.fusion_mode,
            branch_mode=self.branch_mode,
            k_vq=self.k_vq,
            k_geo=self.k_geo,
            k_feat=self.k_feat,
            k_opacity=self.k_opacity,
            ema_decay=self.ema_decay,
            commitment_beta=self.beta,
            refine_steps=self.refine_steps,
            per_gaussian_features=self.per_gaussian_features,
        )


@dataclass
class StepReport:
    step: int
    loss_total: float
    loss_rec: float
    loss_adv_g: float
    loss_adv_d: float
    loss_perceptual: float
    loss_commitment: float
    utilizations: dict[str, float]
    grad_norm: float
    wall_time: float

    def history_line(self) -> str:
        """Deterministic serialization: wall time is deliberately excluded so
        seeded histories compare bitwise."""
        record = {
            "step": self.step,
            "total": self.loss_total,
            "rec": self.loss_rec,
            "adv_g": self.loss_adv_g,
            "adv_d": self.loss_adv_d,
            "perceptual": self.loss_perceptual,
            "commitment": self.loss_commitment,
            "grad_norm": self.grad_norm,
            "util": {k: self.utilizations[k] for k in sorted(self.utilizations)},
        }
        return json.dumps(record, sort_keys=True)


# ---------------------------------------------------------------------------
# Losses


def loss_rec(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over pixels and channels."""
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(recon.shape)}")
    return (target - recon).abs().mean()


def loss_adv(real_logits: torch.Tensor, fake_logits: torch.Tensor, side: str) -> torch.Tensor:
    """Least-squares GAN objective, split per player.

    discriminator: mean[(D(real) - 1)^2 + D(fake)^2]
    generator:     mean[(D(fake) - 1)^2]
    """
    if real_logits.shape != fake_logits.shape:
        raise ValueError("logit maps must have equal shapes")
    if side == "discriminator":
        return ((real_logits - 1.0) ** 2 + fake_logits**2).mean()
    if side == "generator":
        return ((fake_logits - 1.0) ** 2).mean()
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def loss_perceptual(target: torch.Tensor, recon: torch.Tensor, extractor) -> torch.Tensor:
    """Sum over layers of the mean squared feature distance."""
    feats_t = extractor(target)
    feats_r = extractor(recon)
    total = recon.new_zeros(())
    for ft, fr in zip(feats_t, feats_r):
        total = total + (ft - fr).pow(2).mean()
    return total


def total_loss(components: dict[str, torch.Tensor], config: TrainConfig) -> torch.Tensor:
    """L = rec + gamma * adv_g + eta * perceptual + commitment."""
    return (
        components["rec"]
        + config.gamma * components["adv_g"]
        + config.eta * components["perceptual"]
        + components["commitment"]
    )


def effective_gamma(step: int, config: TrainConfig) -> float:
    """Zero during warmup, then a linear ramp to gamma over the same span."""
    w = config.adversarial_warmup_steps
    if w == 0:
        return config.gamma
    if step <= w:
        return 0.0
    return config.gamma * min(1.0, (step - w) / w)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, Optional[torch.Tensor]],
    state: AdamState,
    learning_rate: float,
) -> None:
    """Adaptive-moment update with bias correction, in place.

    Missing/None gradients are treated as zero (the moments still decay).
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    with torch.no_grad():
        for name, p in params.items():
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            g = grads.get(name)
            m, v = state.m[name], state.v[name]
            if g is None:
                m.mul_(b1)
                v.mul_(b2)
            else:
                m.mul_(b1).add_(g, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.add_(-learning_rate * m_hat / (v_hat.sqrt() + state.eps))


def clip_grad_norm(parameters, max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    grads = [p.grad for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum(g.pow(2).sum() for g in grads))
    norm = float(total.item())
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g.mul_(scale)
    return norm


# ---------------------------------------------------------------------------
# Training state and loop


@dataclass
class TrainState:
    config: TrainConfig
    model: TokenizerModel
    discriminator: PatchDiscriminator
    extractor: torch.nn.Module
    gen_opt: AdamState
    disc_opt: AdamState
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    data_perm: np.ndarray = None
    perm_pos: int = 0
    codebooks_initialized: bool = False


def build_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    model = TokenizerModel(config.model_config())
    discriminator = PatchDiscriminator(config.resolution, config.disc_base_width)
    extractor = get_extractor(config.perceptual_extractor, seed=config.seed) \
        if config.perceptual_extractor == "random-multiscale" \
        else get_extractor(config.perceptual_extractor)
    return TrainState(
        config=config,
        model=model,
        discriminator=discriminator,
        extractor=extractor,
        gen_opt=AdamState(),
        disc_opt=AdamState(),
        rng=np.random.default_rng(config.seed),
        data_perm=np.zeros(0, dtype=np.int64),
    )


def _named_params(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.named_parameters())


def _check_finite(components: dict[str, torch.Tensor]) -> None:
    for name, value in components.items():
        if not bool(torch.isfinite(value).all()):
            raise NumericError(f"non-finite loss component: {name}")


def train_step(state: TrainState, batch: torch.Tensor) -> StepReport:
    """One optimization step over a batch of images (B, 3, H, W) in [0, 1]."""
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise ValueError("batch must be a nonempty (B, 3, H, W) tensor")
    t0 = time.perf_counter()
    cfg = state.config
    model = state.model
    state.step += 1
    step = state.step

    out = model(batch, quantize=True)
    rec = loss_rec(batch, out.recon)
    perc = loss_perceptual(batch, out.recon, state.extractor) if cfg.eta > 0 \
        else out.recon.new_zeros(())
    g_eff = effective_gamma(step, cfg)
    if g_eff > 0:
        with torch.no_grad():
            real_logits = state.discriminator(batch)
        adv_g = loss_adv(real_logits, state.discriminator(out.recon), "generator")
    else:
        adv_g = out.recon.new_zeros(())

    components = {
        "rec": rec,
        "adv_g": adv_g,
        "perceptual": perc,
        "commitment": out.commitment,
    }
    _check_finite(components)
    total = (
        rec + g_eff * adv_g + cfg.eta * perc + out.commitment
    )

    for p in model.parameters():
        p.grad = None
    total.backward()
    grad_norm = clip_grad_norm(model.parameters(), cfg.grad_clip)
    params = _named_params(model)
    grads = {name: p.grad for name, p in params.items()}
    optimizer_step(params, grads, state.gen_opt, cfg.learning_rate)

    adv_d_value = 0.0
    if g_eff > 0:
        for p in state.discriminator.parameters():
            p.grad = None
        adv_d = loss_adv(
            state.discriminator(batch),
            state.discriminator(out.recon.detach()),
            "discriminator",
        )
        if not bool(torch.isfinite(adv_d)):
            raise NumericError("non-finite loss component: adv_d")
        adv_d.backward()
        clip_grad_norm(state.discriminator.parameters(), cfg.grad_clip)
        d_params = _named_params(state.discriminator)
        optimizer_step(d_params, {n: p.grad for n, p in d_params.items()},
                       state.disc_opt, cfg.learning_rate)
        adv_d_value = float(adv_d.item())

    # codebooks move by EMA after the gradient step; revival keeps them alive
    utils = {}
    for name, (vectors, indices) in out.ema_feeds.items():
        book = model.codebooks[name]
        ema_update(book, indices, vectors)
        reinit_dead_entries(book, vectors, cfg.stale_threshold, state.rng)
        utils[name] = utilization(book, indices)

    return StepReport(
        step=step,
        loss_total=float(total.item()),
        loss_rec=float(rec.item()),
        loss_adv_g=float(adv_g.item()),
        loss_adv_d=adv_d_value,
        loss_perceptual=float(perc.item()),
        loss_commitment=float(out.commitment.item()),
        utilizations=utils,
        grad_norm=grad_norm,
        wall_time=time.perf_counter() - t0,
    )


def _batch_tensor(dataset: ImageDataset, idx: np.ndarray) -> torch.Tensor:
    images = dataset.images[idx]  # (B, H, W, 3) float32
    return torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()


def train_loop(
    dataset: ImageDataset,
    config: TrainConfig,
    out_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
    state: Optional[TrainState] = None,
) -> tuple[TrainState, list[StepReport]]:
    """Epoch loop with per-epoch checkpoints and a deterministic history.

    Returns the final state plus the step reports produced by this call.
    Resume restores every piece of mutable state (parameters, moments,
    codebooks, RNG, batch order), so a resumed run continues the original
    report stream bitwise.
    """
    from .formats import save_training_checkpoint, load_training_checkpoint

    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    if state is None:
        if resume_from is not None:
            state = load_training_checkpoint(Path(resume_from))
        else:
            state = build_state(config)
    cfg = state.config

    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps > 0:
        total_steps = min(total_steps, cfg.max_steps)

    if not state.codebooks_initialized:
        first = _batch_tensor(dataset, np.arange(min(cfg.batch_size, n)))
        state.model.init_codebooks_from_batch(first, state.rng)
        state.codebooks_initialized = True

    out_dir = Path(out_dir) if out_dir is not None else None
    history_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        history_file = (out_dir / "history.jsonl").open("a" if state.step > 0 else "w")
        if state.step == 0:
            save_training_checkpoint(out_dir / "checkpoint_initial.ckpt", state)

    reports: list[StepReport] = []
    try:
        while state.step < total_steps:
            if state.perm_pos >= len(state.data_perm):
                state.data_perm = state.rng.permutation(n)
                state.perm_pos = 0
                state.epoch += 1 if state.step > 0 else 0
            idx = state.data_perm[state.perm_pos : state.perm_pos + cfg.batch_size]
            state.perm_pos += cfg.batch_size
            report = train_step(state, _batch_tensor(dataset, idx))
            reports.append(report)
            if history_file is not None:
                history_file.write(report.history_line() + "\n")
                history_file.flush()
            epoch_done = state.perm_pos >= len(state.data_perm)
            if out_dir is not None and epoch_done and cfg.checkpoint_every_epochs > 0:
                epoch_index = state.step // steps_per_epoch
                if epoch_index % cfg.checkpoint_every_epochs == 0:
                    save_training_checkpoint(
                        out_dir / f"checkpoint_epoch_{epoch_index:04d}.ckpt", state
                    )
        if out_dir is not None and state.step > 0:
            save_training_checkpoint(out_dir / "checkpoint_final.ckpt", state)
    finally:
        if history_file is not None:
            history_file.close()
    return state, reports
