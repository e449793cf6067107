"""Loss terms for the critic and generator-side modules.

All functions are pure: they take module outputs (or a critic callable) and
return scalar tensors that stay on the autograd graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from modgan.nets import ShapeError, realism_score


class NumericalError(ArithmeticError):
    pass


Critic = Callable[[torch.Tensor], "torch.Tensor | tuple[torch.Tensor, torch.Tensor]"]


def critic_scores(critic: Critic, x: torch.Tensor) -> torch.Tensor:
    """Per-sample scalar scores; realism maps are mean-reduced over space."""
    out = critic(x)
    if isinstance(out, tuple):
        out = out[0]
    return realism_score(out) if out.dim() > 1 else out


def interpolate(
    real: torch.Tensor, fake: torch.Tensor, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """``x_hat = eps * real + (1 - eps) * fake`` with one ``eps ~ U(0, 1)`` per sample."""
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    eps = torch.rand(real.shape[0], *([1] * (real.dim() - 1)), generator=generator, dtype=real.dtype)
    return eps * real + (1 - eps) * fake, eps


def gradient_penalty(critic: Critic, x_hat: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``(||d critic / d x_hat||_2 - 1)^2``.

    Differentiable w.r.t. the critic, and w.r.t. ``x_hat`` when it carries a graph.
    """
    if not x_hat.requires_grad:
        x_hat = x_hat.detach().requires_grad_(True)
    scores = critic_scores(critic, x_hat)
    grad = None
    if scores.requires_grad:
        (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:  # critic ignores its input
        grad = torch.zeros_like(x_hat)
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite critic gradient in gradient penalty")
    norms = grad.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def wasserstein_gap(critic: Critic, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    return critic_scores(critic, real).mean() - critic_scores(critic, fake).mean()


def adversarial_loss(
    critic: Critic,
    real: torch.Tensor,
    fake: torch.Tensor,
    lambda_gp: float = 10.0,
    x_hat: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """``E[D(real)] - E[D(fake)] - lambda_gp * GP``; the critic ascends it."""
    gap = wasserstein_gap(critic, real, fake)
    if lambda_gp == 0:
        return gap
    if x_hat is None:
        x_hat, _ = interpolate(real.detach(), fake.detach(), generator)
    return gap - lambda_gp * gradient_penalty(critic, x_hat)


def cls_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy ``-log softmax(logits)[target]``.

    ``target`` is either class indices ``[B]`` or one-hot rows ``[B, c]``.
    """
    if target.dim() == 2:
        if target.shape != logits.shape:
            raise ShapeError(f"logits {tuple(logits.shape)} vs one-hot {tuple(target.shape)}")
        target = target.argmax(dim=1)
    return F.cross_entropy(logits, target.long())


# Real-image and translated-image classification share one form; the caller
# picks the label (source value for real images, sampled target for fakes).
cls_real = cls_loss
cls_fake = cls_loss


def _mean_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cyclic_er(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between an image and ``R(E(x))``."""
    return _mean_l1(x_rec, x)


def cyclic_t(f_t: torch.Tensor, f_reenc: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between ``T(E(x))`` and ``E(R(T(E(x))))``."""
    return _mean_l1(f_t, f_reenc)


def total_d_loss(adv: Sequence[torch.Tensor], cls_r: Sequence[torch.Tensor], lambda_cls: float) -> torch.Tensor:
    return -sum(adv) + lambda_cls * sum(cls_r)


def total_g_loss(
    adv: Sequence[torch.Tensor],
    cls_f: Sequence[torch.Tensor],
    cyc_er: torch.Tensor | float | None,
    cyc_t: Sequence[torch.Tensor] | None,
    lambda_cls: float,
    lambda_cyc: float,
) -> torch.Tensor:
    """Generator-side total; ``cyc_er``/``cyc_t`` of None drop those terms."""
    total = sum(adv) + lambda_cls * sum(cls_f)
    cyc = (cyc_er if cyc_er is not None else 0.0) + (sum(cyc_t) if cyc_t else 0.0)
    if cyc_er is not None or cyc_t:
        total = total + lambda_cyc * cyc
    return total


@dataclass
class LossBundle:
    """Scalar loss values for one step, keyed per attribute where applicable."""

    adv: list[float] = field(default_factory=list)
    gp: list[float] = field(default_factory=list)
    cls_real: list[float] = field(default_factory=list)
    cls_fake: list[float] = field(default_factory=list)
    cyc_er: float | None = None
    cyc_t: list[float] | None = None
    L_D: float | None = None
    L_G: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def flat(self, names: Sequence[str]) -> dict[str, float]:
        """``{"adv/color": ..., "L_D": ...}`` with absent terms omitted."""
        out: dict[str, float] = {}
        for key in ("adv", "gp", "cls_real", "cls_fake", "cyc_t"):
            vals = getattr(self, key)
            for name, v in zip(names, vals or []):
                out[f"{key}/{name}"] = v
        for key in ("cyc_er", "L_D", "L_G"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        out.update(self.extra)
        return out

    def check_finite(self) -> None:
        n = max(len(self.adv), len(self.cls_fake), len(self.cyc_t or []))
        bad = {k: v for k, v in self.flat([str(i) for i in range(n)]).items() if not math.isfinite(v)}
        if bad:
            raise NumericalError(f"non-finite loss terms: {bad}")
