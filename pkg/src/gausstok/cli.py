"""Operator surface: data generation, training, evaluation, tokenize round
trips, gradient checking, benchmarking, and ablations.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure. Every error
path writes one machine-parseable line to stderr: ``error[<category>]: ...``.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import gradcheck as gradcheck_mod
from .data import (
    ImageDataset,
    MANIFEST_NAME,
    export_corpus,
    generate_toy_corpus,
    load_directory,
    load_manifest_directory,
    write_ppm,
)
from .formats import (
    TokenStream,
    TokenStreamHeader,
    config_from_text,
    config_to_text,
    load_training_checkpoint,
    read_tokens_binary,
    read_tokens_text,
    save_training_checkpoint,
    write_tokens_binary,
    write_tokens_text,
)
from .metrics import evaluate
from .nets import TokenIndices
from .splat import SplatBatch, splat_backward, splat_forward
from .train import NumericError, TrainConfig, train_loop

DEFAULT_SEED = 42
MAX_GRADCHECK_SIZE = 10000


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(args) -> int:
    """--seed when given, 42 otherwise. Training falls back to the config seed."""
    return DEFAULT_SEED if args.seed is None else args.seed


def _load_model(checkpoint: Path):
    path = Path(checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    state = load_training_checkpoint(path)
    state.model.eval()
    return state


def _load_images(path: Path, resolution: int) -> ImageDataset:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"image directory not found: {path}")
    if (path / MANIFEST_NAME).exists():
        return load_manifest_directory(path, resolution)
    train, val = load_directory(path, resolution, split_ratio=1.0, seed=0)
    return train


def _batches(dataset: ImageDataset, batch_size: int = 16):
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        images = torch.from_numpy(dataset.images[start:stop]).permute(0, 3, 1, 2)
        yield start, stop, images


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    dataset = generate_toy_corpus(args.count, args.resolution, _seed(args))
    export_corpus(dataset, Path(args.out))
    print(f"wrote {len(dataset)} images at {args.resolution}x{args.resolution} to {args.out}")
    return 0


def _read_config(path: Path, seed_override) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        config = config_from_text(path.read_text())
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if seed_override is not None:
        config.seed = seed_override
    return config


def cmd_train(args) -> int:
    config = _read_config(args.config, args.seed)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    train_ds, val_ds = load_directory(
        data_dir, config.resolution, config.split_ratio, config.seed
    )
    out_dir = Path(args.out)
    state, reports = train_loop(
        train_ds, config, out_dir=out_dir,
        resume_from=Path(args.resume) if args.resume else None,
    )
    if reports:
        last = reports[-1]
        print(f"finished at step {last.step}: rec={last.loss_rec:.6f} total={last.loss_total:.6f}")
    else:
        print("no steps run; initial checkpoint written")
    if len(val_ds) > 0 and state.codebooks_initialized and state.step > 0:
        report = evaluate(state.model, val_ds)
        (out_dir / "val_report.jsonl").write_text(report.to_json_lines())
        print(f"val: psnr={report.mean_psnr:.3f} ssim={report.mean_ssim:.4f}")
    return 0


def _token_header(state) -> TokenStreamHeader:
    cfg = state.config
    g = state.model.grid_size
    return TokenStreamHeader(
        grid_h=g, grid_w=g, num_gaussians=cfg.num_gaussians,
        k_vq=cfg.k_vq, k_geo=cfg.k_geo, k_feat=cfg.k_feat, k_opacity=cfg.k_opacity,
        feature_layout="per_gaussian" if cfg.per_gaussian_features else "shared",
    )


def cmd_encode(args) -> int:
    state = _load_model(args.checkpoint)
    if state.config.branch_mode != "vq_gs":
        raise DataError("token streams require a vq_gs checkpoint")
    dataset = _load_images(args.images, state.config.resolution)
    if len(dataset) == 0:
        raise UsageError("no images to encode")
    ids, vq, geo, feat, opac = [], [], [], [], []
    for start, stop, images in _batches(dataset):
        tokens = state.model.encode_indices(images)
        ids.extend(dataset.ids[start:stop])
        vq.append(tokens.vq.numpy())
        geo.append(tokens.geo.numpy())
        feat.append(tokens.feat.numpy())
        opac.append(tokens.opacity.numpy())
    stream = TokenStream(
        header=_token_header(state), ids=ids,
        vq=np.concatenate(vq).astype(np.int64),
        geo=np.concatenate(geo).astype(np.int64),
        feat=np.concatenate(feat).astype(np.int64),
        opacity=np.concatenate(opac).astype(np.int64),
    )
    out = Path(args.out)
    if args.binary:
        write_tokens_binary(out, stream)
    else:
        write_tokens_text(out, stream)
    print(f"encoded {len(ids)} images -> {out}")
    return 0


def cmd_decode(args) -> int:
    state = _load_model(args.checkpoint)
    if state.config.branch_mode != "vq_gs":
        raise DataError("token streams require a vq_gs checkpoint")
    tokens_path = Path(args.tokens)
    if not tokens_path.exists():
        raise DataError(f"token file not found: {tokens_path}")
    try:
        with open(tokens_path, "rb") as f:
            is_binary = f.read(8) == b"VGQTOKS1"
        stream = read_tokens_binary(tokens_path) if is_binary else read_tokens_text(tokens_path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    expected = _token_header(state)
    if stream.header != expected:
        raise DataError(
            f"token header {stream.header} does not match checkpoint {expected}"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(stream.ids)
    for start in range(0, n, 16):
        stop = min(start + 16, n)
        tokens = TokenIndices(
            vq=torch.from_numpy(stream.vq[start:stop]),
            geo=torch.from_numpy(stream.geo[start:stop]),
            feat=torch.from_numpy(stream.feat[start:stop]),
            opacity=torch.from_numpy(stream.opacity[start:stop]),
        )
        recon = state.model.decode_indices(tokens).permute(0, 2, 3, 1).numpy()
        for i in range(stop - start):
            name = stream.ids[start + i]
            if args.format == "npy":
                np.save(out_dir / f"{name}.npy", recon[i].astype(np.float32))
            else:
                u8 = np.clip(np.round(recon[i] * 255.0), 0, 255).astype(np.uint8)
                if args.format == "png":
                    from PIL import Image

                    Image.fromarray(u8).save(out_dir / f"{name}.png")
                else:
                    write_ppm(out_dir / f"{name}.ppm", u8)
    print(f"decoded {n} images -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    state = _load_model(args.checkpoint)
    dataset = _load_images(args.data, state.config.resolution)
    report = evaluate(state.model, dataset)
    Path(args.report).write_text(report.to_json_lines())
    utils = " ".join(f"{k}={v:.3f}" for k, v in sorted(report.codebook_utilization.items()))
    print(f"images={report.image_count} psnr={report.mean_psnr:.3f} "
          f"ssim={report.mean_ssim:.4f} util[{utils}]")
    for kind, value in sorted(report.region_psnr.items()):
        print(f"region[{kind}] psnr={value:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.size < 1 or args.size > MAX_GRADCHECK_SIZE:
        raise UsageError(f"--size must be in [1, {MAX_GRADCHECK_SIZE}]")
    results = gradcheck_mod.run_suite(
        seed=_seed(args), configs_per_op=args.size, corrupt=args.corrupt
    )
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24} worst_rel_error={r.worst_rel_error:.3e} "
              f"configs={r.configs} {status}")
    if failed:
        names = ", ".join(r.name for r in failed)
        print(f"error[numeric]: gradient check failed for: {names}", file=sys.stderr)
        return 3
    return 0


def run_bench(num_gaussians: int, grid: tuple[int, int], channels: int,
              iters: int, seed: int) -> dict[str, float]:
    """Median wall times for the tiled and reference kernels, forward and backward."""
    rng = np.random.default_rng(seed)
    n = num_gaussians
    batch = SplatBatch(
        positions=torch.tensor(rng.uniform(0.0, 1.0, (n, 2)), dtype=torch.float32),
        rotations=torch.tensor(rng.uniform(0.0, 2 * np.pi, n), dtype=torch.float32),
        scales=torch.tensor(np.exp(rng.uniform(np.log(0.01), np.log(0.08), (n, 2))),
                            dtype=torch.float32),
        opacities=torch.tensor(rng.uniform(0.2, 1.0, n), dtype=torch.float32),
        features=torch.tensor(rng.normal(0.0, 1.0, (n, channels)), dtype=torch.float32),
        token_of_gaussian=torch.arange(n),
    )
    cot = torch.ones(grid[0], grid[1], channels)

    def timed(fn) -> float:
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    from .splat import splat_reference

    return {
        "tiled_forward": timed(lambda: splat_forward(batch, grid)),
        "tiled_backward": timed(lambda: splat_backward(batch, grid, cot)),
        "reference_forward": timed(lambda: splat_reference(batch, grid)),
        "reference_backward": timed(
            lambda: splat_backward(batch, grid, cot, truncate_sigma=None,
                                   tile_size=max(grid))
        ),
    }


def cmd_bench(args) -> int:
    if args.grid < 1:
        raise UsageError("--grid must be >= 1")
    if args.gaussians < 1 or args.channels < 1 or args.iters < 1:
        raise UsageError("--gaussians, --channels and --iters must be >= 1")
    grid = (args.grid, args.grid)
    times = run_bench(args.gaussians, grid, args.channels, args.iters, _seed(args))
    work = args.gaussians * grid[0] * grid[1]
    print(f"{'kernel':<20} {'median_s':>10} {'gaussians*pixels/s':>20}")
    for name, t in times.items():
        rate = work / t if t > 0 else float("inf")
        print(f"{name:<20} {t:>10.6f} {rate:>20.3e}")
    return 0


ABLATION_AXES = {
    "fusion": ("fusion_mode", ["hadamard", "add", "mask_adding", "cross_attention"]),
    "num_gaussians": ("num_gaussians", [1, 2, 3, 4]),
}


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise UsageError(f"--axis must be one of {sorted(ABLATION_AXES)}")
    base = _read_config(args.config, args.seed)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    train_ds, val_ds = load_directory(data_dir, base.resolution, base.split_ratio, base.seed)
    if len(val_ds) == 0:
        raise DataError("ablation needs a nonempty validation split")
    field_name, values = ABLATION_AXES[args.axis]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        config = config_from_text(config_to_text(base))
        setattr(config, field_name, value)
        run_dir = out_dir / f"{args.axis}_{value}"
        state, reports = train_loop(train_ds, config, out_dir=run_dir)
        if not all(np.isfinite(r.loss_total) for r in reports):
            raise NumericError(f"non-finite loss in ablation run {args.axis}={value}")
        report = evaluate(state.model, val_ds)
        rows.append((value, reports[-1].loss_rec if reports else float("nan"),
                     report.mean_psnr, report.mean_ssim))
    header = f"{args.axis:<18} {'train_rec':>10} {'val_psnr':>9} {'val_ssim':>9}"
    lines = [header]
    for value, rec, p, s in rows:
        lines.append(f"{str(value):<18} {rec:>10.5f} {p:>9.3f} {s:>9.4f}")
    table = "\n".join(lines)
    print(table)
    (out_dir / "ablation.tsv").write_text(
        "\n".join("\t".join(str(x) for x in (args.axis, v, rec, p, s))
                  for v, rec, p, s in rows) + "\n"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser / dispatch


def build_parser() -> _Parser:
    parser = _Parser(prog="gausstok", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a toy corpus as PPM files + manifest")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a tokenizer")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("encode", help="tokenize images into a token stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct images from tokens alone")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("ppm", "png", "npy"), default="ppm")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="metrics over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference suite for every backward")
    p.add_argument("--size", type=int, default=100, help="random configs per op")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="tiled vs reference rasterizer throughput")
    p.add_argument("--gaussians", type=int, default=512)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--iters", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="sweep fusion modes or Gaussians per token")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    for sp in sub.choices.values():
        sp.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
