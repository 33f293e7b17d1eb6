"""Finite-difference verification of every analytic backward pass.

Each op is exercised on many random miniature configurations in float64;
central differences (step 1e-5) are compared against the analytic gradient at
a 1e-3 relative tolerance. ``corrupt`` is a fault-injection hook used by tests
to prove the harness actually detects broken backwards.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .gaussian2d import Gaussian2D, eval_gaussian, eval_gaussian_grad
from .nets import (
    EncoderDecoderConfig,
    Encoder,
    Decoder,
    FusionModule,
    GaussianHead,
    GaussianRefiner,
    ModelConfig,
    PatchDiscriminator,
    TokenizerModel,
)
from .splat import SplatBatch, splat_backward, splat_forward

DEFAULT_STEP = 1e-5
DEFAULT_REL_TOL = 1e-3
# Both-tiny gradients are treated as matching: the FD noise floor is about
# eps * |loss| / step ~ 1e-9..1e-8 absolute, so relative comparison is
# meaningless below this magnitude.
TINY_GRAD = 1e-5

OP_NAMES = (
    "gaussian_kernel",
    "splat",
    "encoder",
    "decoder",
    "refinement",
    "discriminator",
    "fusion_hadamard",
    "fusion_add",
    "fusion_mask_adding",
    "fusion_cross_attention",
    "gs_branch",
    "straight_through",
)


@dataclass
class OpCheckResult:
    name: str
    worst_rel_error: float
    configs: int
    passed: bool


def _rel_error(analytic: float, fd: float) -> float:
    scale = max(abs(analytic), abs(fd))
    if scale < TINY_GRAD:
        return 0.0
    return abs(analytic - fd) / scale


def _fd_scalar(loss_fn: Callable[[], float], tensor: torch.Tensor, flat_index: int,
               step: float) -> Optional[float]:
    """Central difference, or None when the estimate is unreliable.

    The estimate is computed at two step sizes; disagreement means the probe
    straddles an activation kink (ReLU-style), where central differences do
    not approximate the one-sided derivative autograd reports. Such probes
    are skipped; a broken backward still fails on the stable probes.
    """
    flat = tensor.reshape(-1)

    def central(h: float) -> float:
        with torch.no_grad():
            original = flat[flat_index].item()
            flat[flat_index] = original + h
            plus = loss_fn()
            flat[flat_index] = original - h
            minus = loss_fn()
            flat[flat_index] = original
        return (plus - minus) / (2.0 * h)

    half = central(step / 2.0)
    quarter = central(step / 4.0)
    scale = max(abs(half), abs(quarter), TINY_GRAD)
    if abs(half - quarter) > 0.05 * scale:
        return None
    return quarter


def _check_tensors(
    loss_builder: Callable[[], torch.Tensor],
    tensors: list[torch.Tensor],
    rng: np.random.Generator,
    probes_per_tensor: int,
    step: float,
    corrupt: bool,
) -> float:
    """Autograd gradients vs central differences on sampled entries."""
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    loss = loss_builder()
    loss.backward()
    grads = [t.grad for t in tensors]

    def eval_loss() -> float:
        with torch.no_grad():
            return float(loss_builder().item())

    worst = 0.0
    for t, g in zip(tensors, grads):
        numel = t.numel()
        count = min(probes_per_tensor, numel)
        picks = rng.choice(numel, size=count, replace=False)
        for i in picks:
            analytic = float(g.reshape(-1)[int(i)].item()) if g is not None else 0.0
            if corrupt:
                analytic = analytic * 1.5 + 1e-2
            fd = _fd_scalar(eval_loss, t, int(i), step)
            if fd is not None:
                worst = max(worst, _rel_error(analytic, fd))
    for t in tensors:
        t.requires_grad_(False)
        t.grad = None
    return worst


# ---------------------------------------------------------------------------
# Per-op checks; each returns the worst relative error over one random config.


def _random_gaussian(rng: np.random.Generator, dim: int = 2) -> Gaussian2D:
    return Gaussian2D(
        position=rng.uniform(0.2, 0.8, 2),
        rotation=rng.uniform(0.0, 2.0 * np.pi),
        scales=np.exp(rng.uniform(np.log(0.05), np.log(0.5), 2)),
        opacity=rng.uniform(0.1, 1.0),
        feature=rng.normal(0.0, 1.0, dim),
    )


def _check_gaussian_kernel(rng, step, corrupt) -> float:
    g = _random_gaussian(rng)
    x = g.position + rng.normal(0.0, 0.3, 2)
    dpos, drot, dscales = eval_gaussian_grad(g, x)
    analytic = np.array([dpos[0], dpos[1], drot, dscales[0], dscales[1]])
    if corrupt:
        analytic = analytic * 1.5 + 1e-2

    def rebuild(position, rotation, scales) -> float:
        return eval_gaussian(
            Gaussian2D(position, rotation, scales, g.opacity, g.feature), x
        )

    worst = 0.0
    for k in range(5):
        def perturbed(h: float) -> float:
            p = g.position.copy()
            rot = g.rotation
            s = g.scales.copy()
            if k < 2:
                p[k] += h
            elif k == 2:
                rot += h
            else:
                s[k - 3] += h
            return rebuild(p, rot, s)

        fd_full = (perturbed(step) - perturbed(-step)) / (2.0 * step)
        fd_half = (perturbed(step / 2) - perturbed(-step / 2)) / step
        if abs(fd_full - fd_half) > 0.25 * max(abs(fd_full), abs(fd_half), TINY_GRAD):
            continue
        worst = max(worst, _rel_error(float(analytic[k]), fd_half))
    return worst


def _check_splat(rng, step, corrupt) -> float:
    n = int(rng.integers(2, 7))
    height = int(rng.integers(3, 8))
    width = int(rng.integers(3, 8))
    d = int(rng.integers(1, 4))
    batch = SplatBatch(
        positions=torch.tensor(rng.uniform(0.1, 0.9, (n, 2))),
        rotations=torch.tensor(rng.uniform(0.0, 2 * np.pi, n)),
        scales=torch.tensor(np.exp(rng.uniform(np.log(0.08), np.log(0.6), (n, 2)))),
        opacities=torch.tensor(rng.uniform(0.1, 0.95, n)),
        features=torch.tensor(rng.normal(0.0, 1.0, (n, d))),
        token_of_gaussian=torch.arange(n),
    )
    grid = (height, width)
    # untruncated kernel: smooth everywhere, so central differences are valid
    out = splat_forward(batch, grid, truncate_sigma=None)
    grads = splat_backward(batch, grid, out, truncate_sigma=None)

    group_of = {
        "positions": batch.positions, "rotations": batch.rotations,
        "scales": batch.scales, "opacities": batch.opacities,
        "features": batch.features,
    }

    def loss() -> float:
        return float(0.5 * splat_forward(batch, grid, truncate_sigma=None).pow(2).sum().item())

    worst = 0.0
    for name, tensor in group_of.items():
        flat_g = grads[name].reshape(-1)
        picks = rng.choice(tensor.numel(), size=min(2, tensor.numel()), replace=False)
        for i in picks:
            analytic = float(flat_g[int(i)].item())
            if corrupt:
                analytic = analytic * 1.5 + 1e-2
            fd = _fd_scalar(loss, tensor, int(i), step)
            if fd is not None:
                worst = max(worst, _rel_error(analytic, fd))
    return worst


def _tiny_trunk(rng) -> EncoderDecoderConfig:
    return EncoderDecoderConfig(
        input_resolution=8,
        downsample_factor=int(rng.choice([2, 4])),
        channels=int(rng.integers(2, 5)),
        base_width=4,
        res_blocks=1,
    )


def _check_encoder(rng, step, corrupt) -> float:
    torch.manual_seed(int(rng.integers(0, 2**31)))
    cfg = _tiny_trunk(rng)
    enc = Encoder(cfg).double()
    images = torch.tensor(rng.uniform(0.0, 1.0, (1, 3, 8, 8)))
    params = [p for p in enc.parameters()]
    sample = [params[i] for i in rng.choice(len(params), size=3, replace=False)]
    return _check_tensors(
        lambda: 0.5 * enc(images).pow(2).sum(), sample + [images], rng, 2, step, corrupt
    )


def _check_decoder(rng, step, corrupt) -> float:
    torch.manual_seed(int(rng.integers(0, 2**31)))
    cfg = _tiny_trunk(rng)
    dec = Decoder(cfg).double()
    latent = torch.tensor(rng.normal(0.0, 1.0, (1, cfg.channels, cfg.grid_size, cfg.grid_size)))
    params = [p for p in dec.parameters()]
    sample = [params[i] for i in rng.choice(len(params), size=3, replace=False)]
    return _check_tensors(
        lambda: 0.5 * dec(latent).pow(2).sum(), sample + [latent], rng, 2, step, corrupt
    )


def _check_refinement(rng, step, corrupt) -> float:
    torch.manual_seed(int(rng.integers(0, 2**31)))
    d = int(rng.integers(2, 5))
    grid = 4
    head = GaussianHead(d, num_gaussians=1, per_gaussian_features=False).double()
    refiner = GaussianRefiner(d).double()
    with torch.no_grad():  # zero-init residual carries no gradient; randomize
        refiner.mlp[-1].weight.normal_(0.0, 0.3)
        refiner.mlp[-1].bias.normal_(0.0, 0.1)
    latent = torch.tensor(rng.normal(0.0, 1.0, (1, d, grid, grid)))

    def loss() -> torch.Tensor:
        out = refiner(head(latent), latent, grid, steps=1)
        return (
            0.5 * out.pos_raw.pow(2).sum()
            + 0.5 * out.feature_raw.pow(2).sum()
            + 0.5 * out.opacity_logit.pow(2).sum()
        )

    params = list(refiner.parameters())
    sample = [params[i] for i in rng.choice(len(params), size=3, replace=False)]
    return _check_tensors(loss, sample + [latent], rng, 2, step, corrupt)


def _check_discriminator(rng, step, corrupt) -> float:
    torch.manual_seed(int(rng.integers(0, 2**31)))
    disc = PatchDiscriminator(16, base_width=4).double()
    images = torch.tensor(rng.uniform(0.0, 1.0, (1, 3, 16, 16)))
    params = [p for p in disc.parameters()]
    sample = [params[i] for i in rng.choice(len(params), size=3, replace=False)]
    return _check_tensors(
        lambda: 0.5 * disc(images).pow(2).sum(), sample + [images], rng, 2, step, corrupt
    )


def _make_fusion_check(mode: str):
    def check(rng, step, corrupt) -> float:
        torch.manual_seed(int(rng.integers(0, 2**31)))
        c = int(rng.integers(2, 5))
        fusion = FusionModule(mode, c).double()
        a = torch.tensor(rng.normal(0.0, 1.0, (1, c, 4, 4)))
        b = torch.tensor(rng.normal(0.0, 1.0, (1, c, 4, 4)))
        tensors = [a, b] + list(fusion.parameters())
        return _check_tensors(
            lambda: 0.5 * fusion(a, b).pow(2).sum(), tensors, rng, 2, step, corrupt
        )

    return check


def _check_gs_branch(rng, step, corrupt) -> float:
    """Head -> refine -> constraints -> straight-through -> splat, pass-through mode."""
    torch.manual_seed(int(rng.integers(0, 2**31)))
    config = ModelConfig(
        trunk=EncoderDecoderConfig(
            input_resolution=8, downsample_factor=4, channels=3, base_width=4, res_blocks=1
        ),
        num_gaussians=int(rng.integers(1, 3)),
        k_vq=8, k_geo=8, k_feat=8,
        refine_steps=1,
    )
    model = TokenizerModel(config).double()
    images = torch.tensor(rng.uniform(0.0, 1.0, (1, 3, 8, 8)))

    def loss() -> torch.Tensor:
        out = model(images, quantize=False)
        return 0.5 * out.f_gs.pow(2).sum()

    head_params = list(model.gaussian_head.parameters())
    enc_params = list(model.encoder.parameters())
    sample = [
        head_params[int(rng.integers(0, len(head_params)))],
        enc_params[int(rng.integers(0, len(enc_params)))],
    ]
    return _check_tensors(loss, sample, rng, 2, step, corrupt)


def _check_straight_through(rng, step, corrupt) -> float:
    """The estimator has a defined Jacobian: d(0.5||ST(v,q)||^2)/dv == q exactly."""
    from .codebook import straight_through

    v = torch.tensor(rng.normal(0.0, 1.0, (5, 3)), requires_grad=True)
    q = torch.tensor(rng.normal(0.0, 1.0, (5, 3)))
    loss = 0.5 * straight_through(v, q).pow(2).sum()
    loss.backward()
    grad = v.grad.clone()
    if corrupt:
        grad = grad * 1.5 + 1e-2
    return float((grad - q).abs().max().item())


_CHECKS: dict[str, Callable] = {
    "gaussian_kernel": _check_gaussian_kernel,
    "splat": _check_splat,
    "encoder": _check_encoder,
    "decoder": _check_decoder,
    "refinement": _check_refinement,
    "discriminator": _check_discriminator,
    "fusion_hadamard": _make_fusion_check("hadamard"),
    "fusion_add": _make_fusion_check("add"),
    "fusion_mask_adding": _make_fusion_check("mask_adding"),
    "fusion_cross_attention": _make_fusion_check("cross_attention"),
    "gs_branch": _check_gs_branch,
    "straight_through": _check_straight_through,
}


def run_suite(
    seed: int = 42,
    configs_per_op: int = 100,
    rel_tol: float = DEFAULT_REL_TOL,
    step: float = DEFAULT_STEP,
    corrupt: Optional[str] = None,
    ops: Optional[list[str]] = None,
) -> list[OpCheckResult]:
    """Run every op's finite-difference suite; float64 throughout."""
    if corrupt is not None and corrupt not in _CHECKS:
        raise ValueError(f"unknown op for fault injection: {corrupt!r}")
    previous_dtype = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    results = []
    try:
        for name in ops or OP_NAMES:
            if name not in _CHECKS:
                raise ValueError(f"unknown gradcheck op {name!r}")
            rng = np.random.default_rng(seed ^ zlib.crc32(name.encode()))
            worst = 0.0
            count = configs_per_op
            # cheap analytic-identity ops do not need 100 repeats, but run them anyway
            for _ in range(count):
                worst = max(worst, _CHECKS[name](rng, step, corrupt == name))
            results.append(
                OpCheckResult(name=name, worst_rel_error=worst, configs=count,
                              passed=worst <= rel_tol)
            )
    finally:
        torch.set_default_dtype(previous_dtype)
    return results
