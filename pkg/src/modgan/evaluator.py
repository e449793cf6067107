"""Attribute-classifier scoring of translated images and ablation tables."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from modgan.checkpoint import Checkpoint
from modgan.composer import aggregate_masks, transform_chain, upsample_mask
from modgan.config import ConfigError
from modgan.data.manifest import ImageSet, gray_uint8, save_gray, to_uint8
from modgan.schema import AttributeSchema

log = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    pass


# -- classifier ---------------------------------------------------------------


class _Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = (
            nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))
            if stride != 1 or c_in != c_out
            else nn.Identity()
        )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(h)) + self.skip(x))


class AttrNet(nn.Module):
    """Compact residual network with one softmax head per attribute."""

    def __init__(self, head_sizes: Sequence[int], width: int = 16):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, 2, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
        self.stages = nn.Sequential(_Block(w, w, 1), _Block(w, 2 * w, 2), _Block(2 * w, 4 * w, 2))
        self.heads = nn.ModuleList(nn.Linear(4 * w, c) for c in head_sizes)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self.stages(self.stem(x)).mean(dim=(2, 3))
        return [head(h) for head in self.heads]


@dataclass
class ClassifierConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 1e-3
    width: int = 16
    seed: int = 0


@dataclass
class AttrClassifier:
    net: AttrNet
    attributes: list[str]
    schema: AttributeSchema
    accuracy: dict[str, float] = field(default_factory=dict)
    train_accuracy: dict[str, float] = field(default_factory=dict)
    config: ClassifierConfig = field(default_factory=ClassifierConfig)

    @torch.no_grad()
    def predict(self, x: torch.Tensor, batch: int = 256) -> torch.Tensor:
        """Predicted value index per attribute, ``[N, len(attributes)]``."""
        self.net.eval()
        out = []
        for i in range(0, len(x), batch):
            logits = self.net(x[i : i + batch])
            out.append(torch.stack([lg.argmax(1) for lg in logits], dim=1))
        return torch.cat(out) if out else torch.zeros((0, len(self.attributes)), dtype=torch.long)

    def column(self, name: str) -> int:
        return self.attributes.index(name)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), path / "classifier.pt")
        meta = {
            "attributes": self.attributes,
            "schema": self.schema.to_dict(),
            "accuracy": self.accuracy,
            "train_accuracy": self.train_accuracy,
            "config": asdict(self.config),
        }
        (path / "classifier.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AttrClassifier":
        path = Path(path)
        meta = json.loads((path / "classifier.json").read_text())
        schema = AttributeSchema.from_dict(meta["schema"])
        config = ClassifierConfig(**meta["config"])
        net = AttrNet([schema.get(a).size for a in meta["attributes"]], config.width)
        net.load_state_dict(torch.load(path / "classifier.pt", weights_only=True))
        net.eval()
        return cls(net, meta["attributes"], schema, meta["accuracy"], meta["train_accuracy"], config)


def _label_matrix(data: ImageSet, schema: AttributeSchema) -> tuple[list[str], torch.Tensor]:
    names = list(schema.names)
    labels = data.labels
    if data.content is not None:
        names = [schema.content.name, *names]
        labels = torch.cat([data.content[:, None], labels], dim=1)
    return names, labels


@torch.no_grad()
def accuracy(clf: AttrClassifier, data: ImageSet) -> dict[str, float]:
    names, labels = _label_matrix(data, clf.schema)
    pred = clf.predict(_float(data.images))
    return {n: (pred[:, clf.column(n)] == labels[:, j]).float().mean().item() for j, n in enumerate(names)}


def _float(images: torch.Tensor) -> torch.Tensor:
    return images.float() / 127.5 - 1.0 if images.dtype == torch.uint8 else images


def train_classifier(
    train: ImageSet,
    schema: AttributeSchema,
    config: ClassifierConfig | None = None,
    heldout: ImageSet | None = None,
) -> AttrClassifier:
    """Fit a multi-head classifier on real images; accuracies on ``heldout`` and ``train``."""
    config = config or ClassifierConfig()
    names, labels = _label_matrix(train, schema)
    for j, n in enumerate(names):
        if len(torch.unique(labels[:, j])) < 2:
            raise EvaluationError(f"degenerate labels for {n!r}: only one value present in training data")
    torch.manual_seed(config.seed)
    net = AttrNet([schema.get(n).size for n in names], config.width)
    opt = torch.optim.Adam(net.parameters(), config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, config.epochs * ((len(train) + config.batch_size - 1) // config.batch_size)))
    rng = torch.Generator().manual_seed(config.seed)
    for epoch in range(config.epochs):
        net.train()
        perm = torch.randperm(len(train), generator=rng)
        total = 0.0
        for i in range(0, len(train), config.batch_size):
            idx = perm[i : i + config.batch_size]
            if len(idx) < 2:
                continue
            x = _float(train.images[idx])
            logits = net(x)
            loss = sum(F.cross_entropy(lg, labels[idx, j]) for j, lg in enumerate(logits))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        log.info("classifier epoch %d loss %.4f", epoch + 1, total / max(1, len(train)))
    net.eval()
    clf = AttrClassifier(net, names, schema, config=config)
    clf.train_accuracy = accuracy(clf, train)
    clf.accuracy = accuracy(clf, heldout) if heldout is not None else dict(clf.train_accuracy)
    return clf


# -- classification error ---------------------------------------------------------


def combo_tag(schema: AttributeSchema, attrs: Sequence[str]) -> str:
    initials = [n[0].upper() for n in schema.names]
    if len(set(initials)) == len(initials):
        return "".join(initials[schema.index_of(a)] for a in attrs)
    return "+".join(attrs)


def all_combinations(schema: AttributeSchema) -> list[tuple[str, ...]]:
    """Every non-empty attribute subset, by size then schema order."""
    return [c for k in range(1, schema.n + 1) for c in itertools.combinations(schema.names, k)]


@dataclass
class EvalTable:
    rows: dict[str, float]
    variant: str = "full"
    order: str = "fixed"
    n_images: int = 0
    seed: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "order", "combination", "error_percent"])
        for tag, v in self.rows.items():
            w.writerow([self.variant, self.order, tag, f"{v:.2f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        tags = list(self.rows)
        head = f"{'Method':<22}" + "".join(f"{t:>8}" for t in tags)
        label = self.variant if self.order == "fixed" else f"{self.variant} ({self.order} order)"
        row = f"{label:<22}" + "".join(f"{self.rows[t]:>8.2f}" for t in tags)
        return head + "\n" + row + "\n"


Translator = Callable[[torch.Tensor, list[tuple[int, torch.Tensor]]], torch.Tensor]


def model_translator(ckpt: Checkpoint) -> Translator:
    model = ckpt.model

    @torch.no_grad()
    def run(x: torch.Tensor, steps: list[tuple[int, torch.Tensor]]) -> torch.Tensor:
        model.eval()
        f, _, _ = transform_chain(model, model.encoder(x), steps)
        return model.reconstructor(f)

    return run


def sample_targets_different(source: torch.Tensor, n_values: int, rng: torch.Generator) -> torch.Tensor:
    """Uniform over the ``n_values - 1`` values that differ from ``source``."""
    shift = torch.randint(1, n_values, source.shape, generator=rng)
    return (source + shift) % n_values


def check_gate(clf: AttrClassifier, attrs: Sequence[str], gate: float) -> None:
    low = {a: clf.accuracy.get(a, 0.0) for a in attrs if clf.accuracy.get(a, 0.0) < gate}
    if low:
        raise EvaluationError(f"classifier held-out accuracy below {gate}: {low}")


@torch.no_grad()
def classification_error(
    clf: AttrClassifier,
    translator: Translator | Checkpoint,
    test: ImageSet,
    schema: AttributeSchema,
    combinations: Sequence[Sequence[str]] | None = None,
    seed: int = 0,
    order: str = "fixed",
    aggregate: str = "any",
    gate: float = 0.95,
    batch: int = 100,
    variant: str = "full",
) -> EvalTable:
    """Percent of test images whose targeted attributes are not all recognized.

    Each image gets, per targeted attribute, a target drawn uniformly from the
    values other than its source label. ``order="random"`` shuffles the step
    order per image; ``aggregate="mean"`` averages per-attribute errors instead
    of counting an image wrong when any targeted attribute is wrong.
    """
    if order not in ("fixed", "random"):
        raise ValueError(f"order must be 'fixed' or 'random', got {order!r}")
    combinations = [tuple(c) for c in (combinations or all_combinations(schema))]
    check_gate(clf, sorted({a for c in combinations for a in c}), gate)
    if isinstance(translator, Checkpoint):
        translator = model_translator(translator)
    rows: dict[str, float] = {}
    for ci, combo in enumerate(combinations):
        rng = torch.Generator().manual_seed(seed * 1000 + ci)
        attr_idx = sorted(schema.index_of(a) for a in combo)
        wrong_any, wrong_each = [], []
        for start in range(0, len(test), batch):
            sl = slice(start, start + batch)
            x = _float(test.images[sl])
            src = test.labels[sl]
            targets = {i: sample_targets_different(src[:, i], schema.value_counts[i], rng) for i in attr_idx}
            if order == "random":
                perms = [tuple(attr_idx[p] for p in torch.randperm(len(attr_idx), generator=rng)) for _ in range(len(x))]
            else:
                perms = [tuple(attr_idx)] * len(x)
            y = torch.empty_like(x)
            for perm in sorted(set(perms)):
                sel = torch.tensor([k for k, p in enumerate(perms) if p == perm])
                y[sel] = translator(x[sel], [(i, targets[i][sel]) for i in perm])
            pred = clf.predict(y)
            miss = torch.stack([pred[:, clf.column(schema.names[i])] != targets[i] for i in attr_idx], dim=1)
            wrong_any.append(miss.any(dim=1))
            wrong_each.append(miss.float())
        if aggregate == "any":
            err = torch.cat(wrong_any).float().mean().item()
        elif aggregate == "mean":
            err = torch.cat(wrong_each).mean().item()
        else:
            raise ValueError(f"aggregate must be 'any' or 'mean', got {aggregate!r}")
        rows[combo_tag(schema, combo)] = 100.0 * err
    return EvalTable(rows, variant=variant, order=order, n_images=len(test), seed=seed)


ABLATION_VARIANTS = ("full", "no-mask", "no-cyclic")


def run_ablation(
    checkpoints: dict[str, Checkpoint],
    clf: AttrClassifier,
    test: ImageSet,
    schema: AttributeSchema,
    combinations: Sequence[Sequence[str]] | None = None,
    seed: int = 0,
    gate: float = 0.95,
) -> dict[str, EvalTable]:
    """One table per variant plus a random-order table for the full model."""
    missing = [v for v in ABLATION_VARIANTS if v not in checkpoints]
    if missing:
        raise ConfigError(f"missing ablation checkpoints: {missing}")
    tables = {
        v: classification_error(clf, checkpoints[v], test, schema, combinations, seed, gate=gate, variant=v)
        for v in ABLATION_VARIANTS
    }
    tables["full-random"] = classification_error(
        clf, checkpoints["full"], test, schema, combinations, seed, order="random", gate=gate, variant="full"
    )
    return tables


def tables_text(tables: dict[str, EvalTable]) -> str:
    lines = []
    for i, t in enumerate(tables.values()):
        text = t.to_text().splitlines()
        lines.extend(text if i == 0 else text[1:])
    return "\n".join(lines) + "\n"


def tables_csv(tables: dict[str, EvalTable]) -> str:
    out = []
    for i, t in enumerate(tables.values()):
        text = t.to_csv().splitlines()
        out.extend(text if i == 0 else text[1:])
    return "\n".join(out) + "\n"


# -- mask reports --------------------------------------------------------------------


@torch.no_grad()
def export_mask_report(
    ckpt: Checkpoint,
    images: torch.Tensor,
    plans: Sequence[Sequence[tuple[str, str]]],
    out_dir: str | Path,
) -> list[Path]:
    """One grid PNG per (image, plan): input, output, per-step masks, aggregate.

    Per-step masks and the aggregate are also written as grayscale PNGs with
    pixel value ``round(255 * clamp(g', 0, 1))``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, schema = ckpt.model, ckpt.schema
    model.eval()
    size = images.shape[-1]
    paths = []
    x_all = _float(images)
    for n, x in enumerate(x_all):
        f0 = model.encoder(x[None])
        for p, plan in enumerate(plans):
            steps = [(schema.index_of(a), torch.tensor([schema.get(a).index(v)])) for a, v in plan]
            f, masks, _ = transform_chain(model, f0, steps)
            y = model.reconstructor(f)[0]
            panels = [to_uint8(x).permute(1, 2, 0).numpy(), to_uint8(y).permute(1, 2, 0).numpy()]
            stem = f"img{n:03d}_plan{p:02d}"
            real_masks = [m for m in masks if m is not None]
            for k, m in enumerate(real_masks):
                up = upsample_mask(m[0], size)
                save_gray(up, out / f"{stem}_mask{k}.png")
                panels.append(np.repeat(gray_uint8(up[0])[..., None], 3, axis=2))
            if real_masks:
                agg = aggregate_masks([m[0] for m in real_masks], size)
                save_gray(agg, out / f"{stem}_aggregate.png")
                panels.append(np.repeat(gray_uint8(agg[0])[..., None], 3, axis=2))
            grid = np.concatenate(panels, axis=1)
            path = out / f"{stem}_grid.png"
            Image.fromarray(grid, "RGB").save(path)
            paths.append(path)
    return paths
