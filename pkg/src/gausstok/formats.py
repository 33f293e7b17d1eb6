"""File formats: flat-text config, binary checkpoints, token streams.

Checkpoint layout: the 8 magic bytes "VGQCKPT1", a little-endian u32 manifest
length, a UTF-8 JSON manifest (version, config snapshot, one entry per array
with name/dtype/shape), then the raw little-endian payloads in manifest order.
Round-trips are bitwise lossless, including RNG state, so a resumed run
reproduces the uninterrupted one.

Token streams default to line-delimited JSON records (one per image) behind a
JSON header line; a packed binary variant reuses the manifest-then-payload
scheme under the magic "VGQTOKS1".
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

CHECKPOINT_MAGIC = b"VGQCKPT1"
TOKENS_MAGIC = b"VGQTOKS1"

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "u1": "|u1"}
_DTYPE_OF = {np.dtype("<f4"): "f4", np.dtype("<f8"): "f8",
             np.dtype("<i8"): "i8", np.dtype("u1"): "u1"}


# ---------------------------------------------------------------------------
# Flat key = value config files


def config_to_text(config) -> str:
    lines = ["# gausstok training configuration"]
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str):
    """Parse a flat key = value config; unknown keys are rejected."""
    from .train import TrainConfig

    known = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        ftype = known[key].type
        if ftype in ("bool", bool):
            if value not in ("true", "false"):
                raise ValueError(f"config line {lineno}: {key} must be true or false")
            values[key] = value == "true"
        elif ftype in ("int", int):
            values[key] = int(value)
        elif ftype in ("float", float):
            values[key] = float(value)
        else:
            values[key] = value
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# Checkpoints


def _write_manifest_payload(f, magic: bytes, manifest: dict, arrays: dict[str, np.ndarray]):
    entries = []
    for name, arr in arrays.items():
        if arr.dtype not in _DTYPE_OF:
            raise ValueError(f"array {name!r}: unsupported dtype {arr.dtype}")
        entries.append({"name": name, "dtype": _DTYPE_OF[arr.dtype], "shape": list(arr.shape)})
    manifest = dict(manifest, arrays=entries)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    f.write(magic)
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)
    for arr in arrays.values():
        f.write(np.ascontiguousarray(arr).tobytes())


def _read_manifest_payload(f, magic: bytes):
    got = f.read(len(magic))
    if got != magic:
        raise ValueError(f"bad or mismatched format: expected magic {magic!r}, got {got!r}")
    (length,) = struct.unpack("<I", f.read(4))
    manifest = json.loads(f.read(length).decode("utf-8"))
    arrays = {}
    for entry in manifest["arrays"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        raw = f.read(count * dt.itemsize)
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
    return manifest, arrays


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray], config_text: str) -> None:
    with open(path, "wb") as f:
        _write_manifest_payload(f, CHECKPOINT_MAGIC, {"version": 1, "config": config_text}, arrays)


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "rb") as f:
        manifest, arrays = _read_manifest_payload(f, CHECKPOINT_MAGIC)
    if manifest.get("version") != 1:
        raise ValueError(f"checkpoint version mismatch: {manifest.get('version')}")
    return arrays, manifest["config"]


def _f4(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype("<f4", copy=False)


def _state_arrays(state) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {
        "meta/step": np.array([state.step], dtype="<i8"),
        "meta/epoch": np.array([state.epoch], dtype="<i8"),
        "meta/perm_pos": np.array([state.perm_pos], dtype="<i8"),
        "meta/codebooks_initialized": np.array(
            [1 if state.codebooks_initialized else 0], dtype="u1"
        ),
        "meta/data_perm": state.data_perm.astype("<i8"),
        "rng/numpy": np.frombuffer(
            json.dumps(state.rng.bit_generator.state, sort_keys=True).encode("utf-8"),
            dtype="u1",
        ).copy(),
        "rng/torch": torch.get_rng_state().numpy().astype("u1"),
    }
    for name, p in state.model.named_parameters():
        arrays[f"model/{name}"] = _f4(p)
    for name, p in state.discriminator.named_parameters():
        arrays[f"disc/{name}"] = _f4(p)
    for prefix, opt in (("opt_gen", state.gen_opt), ("opt_disc", state.disc_opt)):
        arrays[f"{prefix}/t"] = np.array([opt.t], dtype="<i8")
        for name in sorted(opt.m):
            arrays[f"{prefix}/m/{name}"] = _f4(opt.m[name])
            arrays[f"{prefix}/v/{name}"] = _f4(opt.v[name])
    for name, book in state.model.codebooks.items():
        arrays[f"codebook/{name}/entries"] = _f4(book.entries)
        arrays[f"codebook/{name}/ema_count"] = _f4(book.ema_count)
        arrays[f"codebook/{name}/ema_sum"] = _f4(book.ema_sum)
        arrays[f"codebook/{name}/hit_count"] = book.hit_count.numpy().astype("<i8")
        arrays[f"codebook/{name}/stale_steps"] = book.stale_steps.numpy().astype("<i8")
    return arrays


def save_training_checkpoint(path: Path, state) -> None:
    save_checkpoint(Path(path), _state_arrays(state), config_to_text(state.config))


def load_training_checkpoint(path: Path):
    """Rebuild a full TrainState; every tensor and RNG is restored bitwise."""
    from .train import build_state

    arrays, config_text = load_checkpoint(Path(path))
    config = config_from_text(config_text)
    state = build_state(config)
    state.step = int(arrays["meta/step"][0])
    state.epoch = int(arrays["meta/epoch"][0])
    state.perm_pos = int(arrays["meta/perm_pos"][0])
    state.codebooks_initialized = bool(arrays["meta/codebooks_initialized"][0])
    state.data_perm = arrays["meta/data_perm"].astype(np.int64)
    state.rng.bit_generator.state = json.loads(bytes(arrays["rng/numpy"]).decode("utf-8"))
    torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))

    with torch.no_grad():
        for name, p in state.model.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"model/{name}"]))
        for name, p in state.discriminator.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"disc/{name}"]))
    for prefix, opt, module in (
        ("opt_gen", state.gen_opt, state.model),
        ("opt_disc", state.disc_opt, state.discriminator),
    ):
        opt.t = int(arrays[f"{prefix}/t"][0])
        for name, _ in module.named_parameters():
            m_key, v_key = f"{prefix}/m/{name}", f"{prefix}/v/{name}"
            if m_key in arrays:
                opt.m[name] = torch.from_numpy(arrays[m_key].copy())
                opt.v[name] = torch.from_numpy(arrays[v_key].copy())
    for name, book in state.model.codebooks.items():
        book.entries = torch.from_numpy(arrays[f"codebook/{name}/entries"].copy())
        book.ema_count = torch.from_numpy(arrays[f"codebook/{name}/ema_count"].copy())
        book.ema_sum = torch.from_numpy(arrays[f"codebook/{name}/ema_sum"].copy())
        book.hit_count = torch.from_numpy(arrays[f"codebook/{name}/hit_count"].copy())
        book.stale_steps = torch.from_numpy(arrays[f"codebook/{name}/stale_steps"].copy())
    return state


# ---------------------------------------------------------------------------
# Token streams


@dataclass(frozen=True)
class TokenStreamHeader:
    grid_h: int
    grid_w: int
    num_gaussians: int
    k_vq: int
    k_geo: int
    k_feat: int
    k_opacity: int
    feature_layout: str = "shared"  # or "per_gaussian"

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def to_dict(self) -> dict:
        return {
            "type": "header", "grid": [self.grid_h, self.grid_w],
            "num_gaussians": self.num_gaussians, "k_vq": self.k_vq,
            "k_geo": self.k_geo, "k_feat": self.k_feat,
            "k_opacity": self.k_opacity, "feature_layout": self.feature_layout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenStreamHeader":
        return cls(
            grid_h=d["grid"][0], grid_w=d["grid"][1],
            num_gaussians=d["num_gaussians"], k_vq=d["k_vq"], k_geo=d["k_geo"],
            k_feat=d["k_feat"], k_opacity=d["k_opacity"],
            feature_layout=d.get("feature_layout", "shared"),
        )


@dataclass
class TokenStream:
    """Discrete tokens for a set of images: all indices plus the shape header."""

    header: TokenStreamHeader
    ids: list[str]
    vq: np.ndarray        # (n, N) int64
    geo: np.ndarray       # (n, N, M)
    feat: np.ndarray      # (n, N) shared or (n, N, M)
    opacity: np.ndarray   # (n, N, M)

    def validate(self) -> None:
        h = self.header
        n = len(self.ids)
        m = h.num_gaussians
        shapes = {
            "vq": (self.vq, (n, h.num_tokens), h.k_vq),
            "geo": (self.geo, (n, h.num_tokens, m), h.k_geo),
            "feat": (self.feat,
                     (n, h.num_tokens, m) if h.feature_layout == "per_gaussian"
                     else (n, h.num_tokens), h.k_feat),
            "opacity": (self.opacity, (n, h.num_tokens, m), h.k_opacity),
        }
        for name, (arr, shape, k) in shapes.items():
            if tuple(arr.shape) != shape:
                raise ValueError(f"{name} indices have shape {arr.shape}, expected {shape}")
            self._check_range(name, arr, k)

    def _check_range(self, name: str, arr: np.ndarray, k: int) -> None:
        bad = (arr < 0) | (arr >= k)
        if bad.any():
            flat = np.argwhere(bad)[0]
            image_id = self.ids[flat[0]]
            where = ", ".join(f"axis{j}={v}" for j, v in enumerate(flat[1:], start=1))
            value = arr[tuple(flat)]
            raise ValueError(
                f"image {image_id!r}: {name} index {value} out of range [0, {k}) at {where}"
            )


def write_tokens_text(path: Path, stream: TokenStream) -> None:
    stream.validate()
    with open(path, "w") as f:
        f.write(json.dumps(stream.header.to_dict(), sort_keys=True) + "\n")
        for i, image_id in enumerate(stream.ids):
            record = {
                "type": "image",
                "id": image_id,
                "vq": stream.vq[i].tolist(),
                "geo": stream.geo[i].tolist(),
                "feat": stream.feat[i].tolist(),
                "opacity": stream.opacity[i].tolist(),
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_tokens_text(path: Path) -> TokenStream:
    with open(path) as f:
        lines = [line for line in f.read().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"{path}: empty token stream")
    header = TokenStreamHeader.from_dict(json.loads(lines[0]))
    ids, vq, geo, feat, opacity = [], [], [], [], []
    for line in lines[1:]:
        record = json.loads(line)
        ids.append(record["id"])
        vq.append(record["vq"])
        geo.append(record["geo"])
        feat.append(record["feat"])
        opacity.append(record["opacity"])
    stream = TokenStream(
        header=header, ids=ids,
        vq=np.array(vq, dtype=np.int64),
        geo=np.array(geo, dtype=np.int64),
        feat=np.array(feat, dtype=np.int64),
        opacity=np.array(opacity, dtype=np.int64),
    )
    stream.validate()
    return stream


def write_tokens_binary(path: Path, stream: TokenStream) -> None:
    stream.validate()
    arrays = {
        "vq": stream.vq.astype("<i8"),
        "geo": stream.geo.astype("<i8"),
        "feat": stream.feat.astype("<i8"),
        "opacity": stream.opacity.astype("<i8"),
    }
    manifest = {"version": 1, "header": stream.header.to_dict(), "ids": stream.ids}
    with open(path, "wb") as f:
        _write_manifest_payload(f, TOKENS_MAGIC, manifest, arrays)


def read_tokens_binary(path: Path) -> TokenStream:
    with open(path, "rb") as f:
        manifest, arrays = _read_manifest_payload(f, TOKENS_MAGIC)
    stream = TokenStream(
        header=TokenStreamHeader.from_dict(manifest["header"]),
        ids=list(manifest["ids"]),
        vq=arrays["vq"].astype(np.int64),
        geo=arrays["geo"].astype(np.int64),
        feat=arrays["feat"].astype(np.int64),
        opacity=arrays["opacity"].astype(np.int64),
    )
    stream.validate()
    return stream
