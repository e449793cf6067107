"""Joint adversarial training of all modules.

One iteration runs ``n_critic`` critic steps, each on a fresh real batch, then
one generator-side step on the last of those batches. An epoch is one pass of
the critic over the training set.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from pathlib import Path

import torch
import torch.nn.functional as F

from modgan import objectives as obj
from modgan.checkpoint import build_model, latest_checkpoint, save_checkpoint
from modgan.config import ConfigError, TrainConfig
from modgan.data.manifest import DatasetManifest, ImageSet
from modgan.nets import ModularGAN, realism_score
from modgan.schema import AttributeSchema

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def lr_schedule(config: TrainConfig, epoch: float) -> float:
    """Constant for ``epochs_flat`` epochs, then linear to zero over ``epochs_decay``."""
    if epoch < config.epochs_flat:
        return config.lr_initial
    if config.epochs_decay == 0:
        return 0.0
    frac = (epoch - config.epochs_flat) / config.epochs_decay
    return config.lr_initial * max(0.0, 1.0 - frac)


def one_hot(idx: torch.Tensor, n: int) -> torch.Tensor:
    return F.one_hot(idx.long(), n).float()


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _params(modules) -> list[torch.nn.Parameter]:
    return [p for m in modules for p in m.parameters()]


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        schema: AttributeSchema,
        data: ImageSet,
        out_dir: str | Path | None = None,
    ):
        if config.task == "generation" and (schema.content is None or data.content is None):
            raise ConfigError("generation task needs a content attribute and content labels")
        self.config = config
        self.schema = schema
        self.data = data
        self.out_dir = Path(out_dir) if out_dir else None
        torch.manual_seed(config.seed)
        self.model: ModularGAN = build_model(config, schema)
        self.model.train()
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(_params(self.model.generator_side()), config.lr_initial, betas)
        self.opt_d = torch.optim.Adam(_params(self.model.critic_side()), config.lr_initial, betas)
        self.rng_data = torch.Generator().manual_seed(config.seed + 1)
        self.rng_target = torch.Generator().manual_seed(config.seed + 2)
        self.rng_noise = torch.Generator().manual_seed(config.seed + 3)
        self.iteration = 0
        self.epoch = 0
        self.lr = config.lr_initial

    # -- batch plumbing ------------------------------------------------------

    @property
    def generation(self) -> bool:
        return self.config.task == "generation"

    @property
    def encoder(self):
        return self.model.encoder

    def sample_targets(self, batch: int) -> list[torch.Tensor]:
        return [torch.randint(0, c, (batch,), generator=self.rng_target) for c in self.schema.value_counts]

    def sample_content(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        z = torch.randn(batch, self.config.z_dim, generator=self.rng_noise)
        a0 = torch.randint(0, self.schema.content.size, (batch,), generator=self.rng_target)
        return z, a0

    def source(self, x: torch.Tensor, z: torch.Tensor | None, a0: torch.Tensor | None) -> torch.Tensor:
        if self.generation:
            return self.model.generator(z, one_hot(a0, self.schema.content.size))
        return self.encoder(x)

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    # -- steps ---------------------------------------------------------------

    def critic_step(
        self,
        x: torch.Tensor,
        labels: torch.Tensor,
        targets: list[torch.Tensor],
        content: torch.Tensor | None = None,
        z: torch.Tensor | None = None,
        a0: torch.Tensor | None = None,
    ) -> obj.LossBundle:
        """One descent step of the critic total over every discriminator."""
        cfg, m = self.config, self.model
        with torch.no_grad():
            f = self.source(x, z, a0)
            fakes = [
                m.reconstructor(t(f, one_hot(tg, t.n_values))[0]) for t, tg in zip(m.transformers, targets)
            ]
            initial = m.reconstructor(f) if self.generation else None

        bundle = obj.LossBundle()
        adv, cls_r = [], []
        critics = list(zip(m.discriminators, fakes, labels.T))
        if self.generation:
            critics.append((m.content_disc, initial, content))
        for d, fake, label in critics:
            real_map, real_logits = d(x)
            fake_map, _ = d(fake)
            gap = realism_score(real_map).mean() - realism_score(fake_map).mean()
            x_hat, _ = obj.interpolate(x, fake, self.rng_noise)
            try:
                gp = obj.gradient_penalty(d, x_hat)
            except obj.NumericalError as e:
                self._abort(bundle, "critic", e)
            adv.append(gap - cfg.lambda_gp * gp)
            cls_r.append(obj.cls_real(real_logits, label))
            bundle.gp.append(gp.item())
        loss = obj.total_d_loss(adv, cls_r, cfg.lambda_cls)
        n = self.schema.n
        bundle.adv = [a.item() for a in adv[:n]]
        bundle.cls_real = [c.item() for c in cls_r[:n]]
        if self.generation:
            bundle.extra["adv/content"] = adv[n].item()
            bundle.extra["gp/content"] = bundle.gp.pop()
            bundle.extra["cls_real/content"] = cls_r[n].item()
        bundle.L_D = loss.item()
        self._check(bundle, "critic")
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        return bundle

    def generator_step(
        self,
        x: torch.Tensor,
        labels: torch.Tensor,
        targets: list[torch.Tensor],
        z: torch.Tensor | None = None,
        a0: torch.Tensor | None = None,
    ) -> obj.LossBundle:
        """One descent step of the generator-side total (critics frozen).

        The adversarial term keeps only its generator-dependent part,
        ``-E[D(fake)]``; the real-image score and the penalty are constants here.
        """
        cfg, m = self.config, self.model
        use_cyc = cfg.use_cyclic and self.encoder is not None
        critic_side = m.critic_side()
        _set_requires_grad(critic_side, False)
        try:
            f = self.source(x, z, a0)
            adv, cls_f, cyc_t, masks = [], [], [], []
            for t, d, tg in zip(m.transformers, m.discriminators, targets):
                f_t, mask = t(f, one_hot(tg, t.n_values))
                y = m.reconstructor(f_t)
                fake_map, logits = d(y)
                adv.append(-realism_score(fake_map).mean())
                cls_f.append(obj.cls_fake(logits, tg))
                if use_cyc:
                    cyc_t.append(obj.cyclic_t(f_t, self.encoder(y)))
                masks.append(mask)
            cyc_er = None
            if use_cyc:
                f_real = f if not self.generation else self.encoder(x)
                cyc_er = obj.cyclic_er(x, m.reconstructor(f_real))
            bundle = obj.LossBundle()
            bundle.extra.update({f"adv_g/{n}": a.item() for n, a in zip(self.schema.names, adv)})
            bundle.cls_fake = [c.item() for c in cls_f]
            if self.generation:
                initial_map, initial_logits = m.content_disc(m.reconstructor(f))
                adv.append(-realism_score(initial_map).mean())
                cls_f.append(obj.cls_fake(initial_logits, a0))
                bundle.extra["adv_g/content"] = adv[-1].item()
                bundle.extra["cls_fake/content"] = cls_f[-1].item()
            loss = obj.total_g_loss(adv, cls_f, cyc_er, cyc_t or None, cfg.lambda_cls, cfg.lambda_cyc)
            if use_cyc:
                bundle.cyc_er = cyc_er.item()
                bundle.cyc_t = [c.item() for c in cyc_t]
            for name, mask in zip(self.schema.names, masks):
                if mask is not None:
                    bundle.extra[f"mask_mean/{name}"] = mask.mean().item()
            bundle.L_G = loss.item()
            self._check(bundle, "generator")
            self.opt_g.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_g.step()
        finally:
            _set_requires_grad(critic_side, True)
        return bundle

    def _check(self, bundle: obj.LossBundle, where: str) -> None:
        try:
            bundle.check_finite()
        except obj.NumericalError as e:
            self._abort(bundle, where, e)

    def _abort(self, bundle: obj.LossBundle, where: str, err: Exception) -> None:
        if self.out_dir:
            diag = {"iteration": self.iteration, "epoch": self.epoch, "step": where,
                    "error": str(err), "losses": bundle.flat(self.schema.names), "lr": self.lr}
            (self.out_dir / "diagnostics.json").write_text(json.dumps(diag, indent=2, default=str))
        raise TrainingError(f"{where} step at iteration {self.iteration}: {err}") from err

    # -- loop ----------------------------------------------------------------

    def iters_per_epoch(self) -> int:
        n_batches = max(1, len(self.data) // self.config.batch_size)
        return max(1, n_batches // self.config.n_critic)

    def _batches(self) -> list[torch.Tensor]:
        n, b = len(self.data), self.config.batch_size
        perm = torch.randperm(n, generator=self.rng_data)
        if n < b:
            return [perm]
        return [perm[i : i + b] for i in range(0, n - b + 1, b)]

    def run_epoch(self, metrics: "MetricsWriter | None" = None) -> None:
        cfg = self.config
        batches = self._batches()
        per_epoch = self.iters_per_epoch()
        for k in range(per_epoch):
            self.set_lr(lr_schedule(cfg, self.epoch + k / per_epoch))
            for j in range(cfg.n_critic):
                idx = batches[(k * cfg.n_critic + j) % len(batches)]
                x, labels = self.data.batch(idx)
                content = self.data.content[idx] if self.generation else None
                targets = self.sample_targets(len(idx))
                z = a0 = None
                if self.generation:
                    z, a0 = self.sample_content(len(idx))
                d_bundle = self.critic_step(x, labels, targets, content, z, a0)
            targets = self.sample_targets(len(idx))
            if self.generation:
                z, a0 = self.sample_content(len(idx))
            g_bundle = self.generator_step(x, labels, targets, z, a0)
            self.iteration += 1
            if metrics and (self.iteration % cfg.log_every == 0 or k == per_epoch - 1):
                values = {"lr": self.lr, **d_bundle.flat(self.schema.names), **g_bundle.flat(self.schema.names)}
                metrics.write(self.iteration, values)
        self.epoch += 1

    def state(self) -> dict:
        return {
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng_data": self.rng_data.get_state(),
            "rng_target": self.rng_target.get_state(),
            "rng_noise": self.rng_noise.get_state(),
            "torch_rng": torch.get_rng_state(),
            "iteration": self.iteration,
            "epoch": self.epoch,
        }

    def load_state(self, ckpt_dir: Path) -> None:
        blocks = self.model.named_blocks()
        for name, block in blocks.items():
            block.load_state_dict(torch.load(ckpt_dir / f"{name}.pt", weights_only=True))
        st = torch.load(ckpt_dir / "trainer_state.pt", weights_only=False)
        self.opt_g.load_state_dict(st["opt_g"])
        self.opt_d.load_state_dict(st["opt_d"])
        self.rng_data.set_state(st["rng_data"])
        self.rng_target.set_state(st["rng_target"])
        self.rng_noise.set_state(st["rng_noise"])
        torch.set_rng_state(st["torch_rng"])
        self.iteration, self.epoch = st["iteration"], st["epoch"]

    def save(self, tag: str) -> Path:
        assert self.out_dir is not None
        ckpt_root = self.out_dir / "checkpoints"
        path = save_checkpoint(
            ckpt_root / tag, self.model, self.schema, self.config, self.iteration, self.epoch, self.state()
        )
        if tag != "final":
            (ckpt_root / "latest").write_text(tag + "\n")
            self._prune(ckpt_root)
        return path

    def _prune(self, ckpt_root: Path) -> None:
        keep = self.config.keep_checkpoints
        if keep <= 0:
            return
        epochs = sorted(p for p in ckpt_root.glob("epoch_*") if p.is_dir())
        for old in epochs[:-keep]:
            shutil.rmtree(old)

    def train(self, resume: bool = False) -> Path | None:
        """Run the full schedule; checkpoints every epoch and a ``final`` one at the end."""
        metrics = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.config.save(self.out_dir / "config.yaml")
            if resume and (latest := latest_checkpoint(self.out_dir)) is not None:
                self.load_state(latest)
                log.info("resumed from %s (epoch %d, iteration %d)", latest, self.epoch, self.iteration)
            metrics = MetricsWriter(self.out_dir, truncate_after=self.iteration if resume else 0)
        start = time.perf_counter()
        while self.epoch < self.config.epochs:
            try:
                self.run_epoch(metrics)
            except OSError as e:
                raise TrainingError(f"I/O failure at iteration {self.iteration}: {e}") from e
            if metrics:
                metrics.timing(self.iteration, self.epoch, time.perf_counter() - start)
                self.save(f"epoch_{self.epoch:04d}")
            log.info("epoch %d/%d done, iteration %d, lr %.3g", self.epoch, self.config.epochs, self.iteration, self.lr)
        if metrics:
            metrics.close()
            return self.save("final")
        return None


class MetricsWriter:
    """Append-only ``metrics.csv`` (``iteration,loss_name,value``) plus ``timing.csv``.

    Wall-clock lives in the separate timing file so the metrics log is
    byte-identical across runs with the same seed.
    """

    def __init__(self, out_dir: Path, truncate_after: int = 0):
        self.path = out_dir / "metrics.csv"
        self.timing_path = out_dir / "timing.csv"
        rows = []
        if truncate_after and self.path.exists():
            with open(self.path, newline="") as fh:
                rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= truncate_after]
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss_name", "value"])
            w.writerows(rows)
        if not truncate_after or not self.timing_path.exists():
            self.timing_path.write_text("iteration,epoch,wall_seconds\n")
        self._fh = open(self.path, "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self.last_iteration = int(rows[-1][0]) if rows else 0

    def write(self, iteration: int, values: dict[str, float]) -> None:
        if iteration <= self.last_iteration:
            raise TrainingError(f"metrics iteration {iteration} not after {self.last_iteration}")
        for name, v in values.items():
            self._w.writerow([iteration, name, repr(float(v))])
        self._fh.flush()
        self.last_iteration = iteration

    def timing(self, iteration: int, epoch: int, seconds: float) -> None:
        with open(self.timing_path, "a") as fh:
            fh.write(f"{iteration},{epoch},{seconds:.3f}\n")

    def close(self) -> None:
        self._fh.close()


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
    resume: bool = False,
) -> tuple[Trainer, Path | None]:
    """Load the manifest's images and run the configured schedule."""
    manifest.validate(check_files=False)
    data = ImageSet.from_manifest(manifest)
    if len(data) and data.images.shape[-1] != config.image_size:
        raise ConfigError(f"dataset images are {data.images.shape[-1]}px but image_size={config.image_size}")
    trainer = Trainer(config, manifest.schema, data, out_dir)
    path = trainer.train(resume=resume)
    return trainer, path
