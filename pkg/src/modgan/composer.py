"""Test-time assembly of transformer chains.

Plan grammar::

    (img:<path> | gen:<value>) -> attr=value -> ... -> out

Steps run in the order written, directly on feature maps (no intermediate
reconstruct/encode round trips); the reconstructor runs once at the end.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from modgan.checkpoint import Checkpoint
from modgan.data.manifest import load_png
from modgan.nets import ModularGAN
from modgan.schema import AttributeSchema, SchemaError
from modgan.trainer import one_hot


class PlanError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


@dataclass
class CompositionPlan:
    source: str  # "img" or "gen"
    arg: str  # image path or content value
    steps: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def text(self) -> str:
        parts = [f"{self.source}:{self.arg}", *(f"{a}={v}" for a, v in self.steps), "out"]
        return " -> ".join(parts)


@dataclass
class CompositionResult:
    output: torch.Tensor  # [B, 3, h, w]
    masks: list[torch.Tensor | None]  # per step, [B, 1, H, W] or None without masks
    feature_norms: list[float]  # mean L2 norm of the feature map after the source and each step


_SEP = re.compile(r"\s*->\s*")


def parse_plan(text: str, schema: AttributeSchema) -> CompositionPlan:
    tokens: list[tuple[str, int]] = []
    pos = 0
    for m in _SEP.finditer(text):
        tokens.append((text[pos : m.start()], pos))
        pos = m.end()
    tokens.append((text[pos:], pos))
    tokens = [(t.strip(), off + len(t) - len(t.lstrip())) for t, off in tokens]

    if len(tokens) < 2:
        raise PlanError("plan needs a source and a final 'out'", len(text))
    last, last_off = tokens[-1]
    if last != "out":
        raise PlanError(f"plan must end with 'out', found {last!r}", last_off)

    head, head_off = tokens[0]
    kind, sep, arg = head.partition(":")
    if not sep or kind not in ("img", "gen") or not arg:
        raise PlanError(f"source must be 'img:<path>' or 'gen:<value>', found {head!r}", head_off)
    if kind == "gen":
        if schema.content is None:
            raise PlanError("schema has no content attribute for 'gen:' sources", head_off)
        if arg not in schema.content.values:
            raise PlanError(f"unknown {schema.content.name} value {arg!r}", head_off + 4)

    steps = []
    for tok, off in tokens[1:-1]:
        attr, sep, value = tok.partition("=")
        if not sep or not attr or not value:
            raise PlanError(f"step must be 'attr=value', found {tok!r}", off)
        attr, value = attr.strip(), value.strip()
        try:
            a = schema.attributes[schema.index_of(attr)]
        except SchemaError as e:
            raise PlanError(str(e), off) from None
        if value not in a.values:
            raise PlanError(f"unknown value {value!r} for {attr!r}; expected one of {list(a.values)}", off + tok.index("=") + 1)
        steps.append((attr, value))
    return CompositionPlan(kind, arg, steps)


def transform_chain(
    model: ModularGAN,
    f: torch.Tensor,
    steps: Sequence[tuple[int, torch.Tensor]],
) -> tuple[torch.Tensor, list[torch.Tensor | None], list[float]]:
    """Fold ``(attribute index, target index per sample)`` steps over a feature map."""
    masks, norms = [], [_norm(f)]
    for i, target in steps:
        t = model.transformers[i]
        f, mask = t(f, one_hot(target, t.n_values))
        masks.append(mask)
        norms.append(_norm(f))
    return f, masks, norms


def _norm(f: torch.Tensor) -> float:
    return f.flatten(1).norm(dim=1).mean().item()


@torch.no_grad()
def execute(
    plan: CompositionPlan,
    ckpt: Checkpoint,
    image: torch.Tensor | None = None,
    z: torch.Tensor | None = None,
    seed: int = 0,
) -> CompositionResult:
    """Run ``plan`` against a loaded checkpoint.

    ``image`` (``[3, h, w]`` or batched) overrides loading ``img:`` paths;
    ``z`` overrides the seeded noise for ``gen:`` sources.
    """
    model, schema = ckpt.model, ckpt.schema
    model.eval()
    if plan.source == "img":
        if model.encoder is None:
            raise SchemaError("checkpoint has no encoder; use a 'gen:' source")
        x = image if image is not None else load_png(Path(plan.arg), ckpt.config.image_size)
        x = x if x.dim() == 4 else x[None]
        f = model.encoder(x)
    else:
        if model.generator is None:
            raise SchemaError("checkpoint has no generator; use an 'img:' source")
        if z is None:
            z = torch.randn(1, ckpt.config.z_dim, generator=torch.Generator().manual_seed(seed))
        a0 = torch.full((len(z),), schema.content.index(plan.arg))
        f = model.generator(z, one_hot(a0, schema.content.size))
    b = f.shape[0]
    steps = []
    for attr, value in plan.steps:
        i = schema.index_of(attr)
        steps.append((i, torch.full((b,), schema.attributes[i].index(value))))
    f, masks, norms = transform_chain(model, f, steps)
    return CompositionResult(model.reconstructor(f), masks, norms)


def aggregate_masks(masks: Sequence[torch.Tensor], size: int | None = None) -> torch.Tensor:
    """Sum of masks clamped to [0, 1], nearest-upsampled to ``size`` if given."""
    masks = [m for m in masks if m is not None]
    if not masks:
        raise ValueError("aggregate_masks needs at least one mask")
    shapes = {tuple(m.shape) for m in masks}
    if len(shapes) != 1:
        raise ValueError(f"masks differ in shape: {sorted(shapes)}")
    total = torch.stack(masks).sum(0).clamp(0.0, 1.0)
    if size is not None and total.shape[-1] != size:
        squeeze = total.dim() == 3
        t4 = total[None] if squeeze else total
        t4 = F.interpolate(t4, size=(size, size), mode="nearest")
        total = t4[0] if squeeze else t4
    return total


def upsample_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    m4 = mask if mask.dim() == 4 else mask[None]
    out = F.interpolate(m4, size=(size, size), mode="nearest")
    return out if mask.dim() == 4 else out[0]
