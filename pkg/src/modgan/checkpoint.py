"""Checkpoint directories: one ``<block>.pt`` per module plus ``manifest.json``."""

from __future__ import annotations

import hashlib
import io
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import torch

from modgan.config import TrainConfig
from modgan.nets import ModularGAN, NetSpec
from modgan.schema import AttributeSchema

FORMAT_VERSION = 1


class LoadError(RuntimeError):
    pass


def net_spec(config: TrainConfig) -> NetSpec:
    return NetSpec(
        image_size=config.image_size,
        width=config.width,
        z_dim=config.z_dim,
        n_res=config.n_res,
        d_layers=config.disc_layers,
    )


def build_model(config: TrainConfig, schema: AttributeSchema) -> ModularGAN:
    generation = config.task == "generation"
    if generation and schema.content is None:
        raise LoadError("generation task needs a schema with a content attribute")
    return ModularGAN(
        net_spec(config),
        schema.value_counts,
        with_encoder=not generation or config.gen_encoder,
        content_values=schema.content.size if generation else None,
        use_mask=config.use_mask,
    )


def _tensor_bytes(state: dict) -> bytes:
    buf = io.BytesIO()
    torch.save(state, buf)
    return buf.getvalue()


@dataclass
class Checkpoint:
    model: ModularGAN
    schema: AttributeSchema
    config: TrainConfig
    iteration: int
    epoch: int
    path: Path | None = None


def save_checkpoint(
    path: str | Path,
    model: ModularGAN,
    schema: AttributeSchema,
    config: TrainConfig,
    iteration: int,
    epoch: int,
    trainer_state: dict | None = None,
) -> Path:
    """Write atomically: build in ``<path>.tmp`` then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    digests = {}
    for name, block in model.named_blocks().items():
        blob = _tensor_bytes(block.state_dict())
        (tmp / f"{name}.pt").write_bytes(blob)
        digests[name] = hashlib.sha256(blob).hexdigest()
    if trainer_state is not None:
        torch.save(trainer_state, tmp / "trainer_state.pt")
    manifest = {
        "format_version": FORMAT_VERSION,
        "iteration": iteration,
        "epoch": epoch,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "schema": schema.to_dict(),
        "blocks": digests,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def read_manifest(path: str | Path) -> dict:
    mf = Path(path) / "manifest.json"
    if not mf.exists():
        raise LoadError(f"no checkpoint manifest at {mf}")
    meta = json.loads(mf.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"unsupported checkpoint format {meta.get('format_version')}")
    return meta


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    meta = read_manifest(path)
    config = TrainConfig.from_dict(meta["config"])
    schema = AttributeSchema.from_dict(meta["schema"])
    model = build_model(config, schema)
    blocks = model.named_blocks()
    missing = [n for n in blocks if not (path / f"{n}.pt").exists()]
    if missing:
        raise LoadError(f"checkpoint {path} is missing module weights: {missing}")
    for name, block in blocks.items():
        state = torch.load(path / f"{name}.pt", map_location="cpu", weights_only=True)
        block.load_state_dict(state)
    model.eval()
    return Checkpoint(model, schema, config, meta["iteration"], meta["epoch"], path)


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    ptr = Path(run_dir) / "checkpoints" / "latest"
    if not ptr.exists():
        return None
    target = Path(run_dir) / "checkpoints" / ptr.read_text().strip()
    return target if target.exists() else None


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept a checkpoint directory or a run directory (uses ``final``, else ``latest``)."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return path
    final = path / "checkpoints" / "final"
    if (final / "manifest.json").exists():
        return final
    latest = latest_checkpoint(path)
    if latest is None:
        raise LoadError(f"no checkpoint found under {path}")
    return latest
