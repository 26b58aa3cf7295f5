"""Two-stage training: Stage One with the alpha/beta schedule, then Stage Two on a frozen Stage One."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, model_fingerprint, pack_state, save_checkpoint, unpack_state
from .dataset.splits import holdout_validation
from .errors import ConfigError, DivergenceError, FingerprintMismatchError
from .eval import batched_iou
from .losses import (Stage1LossWeights, disc_loss, gen_loss, gradient_penalty, stage1_loss, stage2_gen_objective,
                     weighted_bce_with_logits)
from .models.stage1 import Stage1Config, Stage1Net
from .models.stage2 import Critic, Generator, Stage2Config, squash

log = logging.getLogger(__name__)

METRIC_KEYS = ("epoch", "l_depth", "l_mask", "l_bce", "l_g", "l_d", "iou_val")


@dataclass
class TrainConfig:
    stage1_epochs: int = 800
    stage2_epochs: int = 500
    learning_rate: float = 0.001
    betas: tuple = (0.9, 0.999)
    batch_size: int = 4
    seed: int = 0
    gamma: float = 0.8
    lambda_gp: float = 10.0
    alpha_bce: float = 0.5
    disc_steps_per_gen: int = 5
    use_discriminator: bool = True
    schedule_boundaries: tuple = (100, 300)
    schedule_weights: tuple = ((10.0, 1000.0), (1000.0, 1000.0), (1000.0, 100.0))
    val_fraction: float = 0.1
    checkpoint_every: int = 50
    ablations: dict = field(default_factory=lambda: {"lfe": True, "msfe": True, "shape_encoder": True})
    stage1: dict = field(default_factory=dict)  # Stage1Config overrides
    stage2: dict = field(default_factory=dict)  # Stage2Config overrides

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.schedule_boundaries = tuple(self.schedule_boundaries)
        self.schedule_weights = tuple(tuple(w) for w in self.schedule_weights)
        self.ablations = {"lfe": True, "msfe": True, "shape_encoder": True, **self.ablations}
        self.validate()

    def validate(self):
        if self.stage1_epochs <= 0 or self.stage2_epochs <= 0:
            raise ConfigError("epoch counts must be positive")
        b = self.schedule_boundaries
        if len(b) != 2 or not (0 < b[0] < b[1] < self.stage1_epochs):
            raise ConfigError(f"schedule boundaries {b} must be strictly increasing and below stage1_epochs")
        if len(self.schedule_weights) != 3:
            raise ConfigError("schedule_weights needs one (alpha, beta) pair per phase")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.batch_size < 1 or self.disc_steps_per_gen < 1:
            raise ConfigError("batch_size and disc_steps_per_gen must be positive")
        unknown = set(self.ablations) - {"lfe", "msfe", "shape_encoder"}
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}")

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def stage1_config(self, resolution):
        opts = {"input_resolution": tuple(resolution), **self.stage1,
                "enable_lfe": self.ablations["lfe"], "enable_msfe": self.ablations["msfe"]}
        return Stage1Config(**opts)

    def stage2_config(self, resolution, voxel_resolution):
        opts = {"input_resolution": tuple(resolution), "voxel_resolution": voxel_resolution, **self.stage2,
                "enable_shape_encoder": self.ablations["shape_encoder"]}
        return Stage2Config(**opts)


def stage1_schedule(epoch, cfg):
    """(alpha, beta) for a 0-based epoch: a step function with jumps at the two boundaries."""
    if not 0 <= epoch < cfg.stage1_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.stage1_epochs})")
    first, second = cfg.schedule_boundaries
    phase = 0 if epoch < first else 1 if epoch < second else 2
    return Stage1LossWeights(*cfg.schedule_weights[phase])


def _adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas)


def _batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _tensor(a):
    return torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)


class MetricsLog:
    """Per-epoch JSON lines; keeps records in memory and optionally appends to a file."""

    def __init__(self, path=None, records=None):
        self.path = Path(path) if path else None
        self.records = list(records or [])

    def append(self, record):
        rec = {k: record.get(k) for k in METRIC_KEYS}
        rec.update({k: v for k, v in record.items() if k not in rec})
        self.records.append(rec)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def rewrite(self):
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))


@dataclass
class Stage1Run:
    model: Stage1Net
    checkpoint: Checkpoint
    history: list


def stage1_checkpoint(model, opt, epoch, cfg, data_gen, history):
    tensors = {f"model/{k}": v.detach().clone() for k, v in model.state_dict().items()}
    state = {
        "optimizer": pack_state(opt.state_dict(), tensors, "optim"),
        "data_rng": pack_state(data_gen.get_state(), tensors, "rng/data"),
        "train_config": cfg.to_dict(),
        "history": history,
    }
    return Checkpoint(1, epoch, model.cfg.to_dict(), model_fingerprint(model, model.cfg.fingerprint()), tensors, state)


def load_stage1_model(ckpt):
    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt, expect_stage=1)
    model = Stage1Net(Stage1Config.from_dict(ckpt.config))
    model.load_state_dict(ckpt.module_state("model"))
    model.eval()
    return model


def _stage1_eval(model, x, y, batch_size=32):
    """(L_Depth, L_Mask, depth MSE over true-foreground pixels) on a held-out set."""
    if len(x) == 0:
        return float("nan"), float("nan"), float("nan")
    total_d = total_m = sq_err = fg = 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            _, _, c = model(x[i:i + batch_size])
            gt = y[i:i + batch_size]
            _, ld, lm = stage1_loss(c, gt, Stage1LossWeights(1.0, 1.0))
            n = len(c)
            total_d += float(ld) * n
            total_m += float(lm) * n
            sq_err += float((gt[:, 1] * (c[:, 0] - gt[:, 0]) ** 2).sum())
            fg += float(gt[:, 1].sum())
    return total_d / len(x), total_m / len(x), sq_err / fg if fg else float("nan")


def train_stage1(data, split, cfg, out_dir=None, resume=None, epochs=None, on_epoch=None):
    """Fit Stage One on the training side of ``split``.

    ``resume`` continues from a checkpoint (object or path); ``epochs`` caps the
    number of epochs run in this call (default: up to ``cfg.stage1_epochs``).
    Checkpoints land in ``out_dir`` every ``cfg.checkpoint_every`` epochs and at
    the end, next to ``metrics.jsonl``.
    """
    out_dir = Path(out_dir) if out_dir else None
    fit_ids, val_ids = holdout_validation(split.train_samples, cfg.val_fraction, cfg.seed)
    if not fit_ids:
        raise ConfigError("the training split is empty")
    fx, fy = _tensor(data.posed[data.index_of(fit_ids)]), _tensor(data.canonical[data.index_of(fit_ids)])
    vx, vy = _tensor(data.posed[data.index_of(val_ids)]), _tensor(data.canonical[data.index_of(val_ids)])

    torch.manual_seed(cfg.seed)
    model = Stage1Net(cfg.stage1_config(data.resolution))
    opt = _adam(model.parameters(), cfg)
    data_gen = torch.Generator().manual_seed(cfg.seed + 1)
    history, start = [], 0
    if resume is not None:
        if isinstance(resume, (str, Path)):
            resume = load_checkpoint(resume, expect_stage=1)
        if resume.config != model.cfg.to_dict():
            raise FingerprintMismatchError("resume checkpoint was trained with a different stage-one config")
        model.load_state_dict(resume.module_state("model"))
        opt.load_state_dict(unpack_state(resume.state["optimizer"], resume.tensors))
        data_gen.set_state(unpack_state(resume.state["data_rng"], resume.tensors))
        history, start = list(resume.state["history"]), resume.epoch
    metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir else None, history)
    metrics.rewrite()

    stop = cfg.stage1_epochs if epochs is None else min(cfg.stage1_epochs, start + epochs)
    last_saved = None
    ckpt = stage1_checkpoint(model, opt, start, cfg, data_gen, metrics.records)
    for epoch in range(start, stop):
        weights = stage1_schedule(epoch, cfg)
        model.train()
        sums = np.zeros(2)
        for idx in _batches(len(fx), cfg.batch_size, data_gen):
            _, _, c = model(fx[idx])
            loss, ld, lm = stage1_loss(c, fy[idx], weights)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite stage-one loss at epoch {epoch}", last_saved)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += np.array([ld.item(), lm.item()]) * len(idx)
        model.eval()
        val_d, val_m, val_mse = _stage1_eval(model, vx, vy)
        rec = {"epoch": epoch, "stage": 1, "l_depth": float(sums[0] / len(fx)), "l_mask": float(sums[1] / len(fx)),
               "val_l_depth": val_d, "val_l_mask": val_m, "val_depth_mse": val_mse,
               "alpha": weights.alpha, "beta": weights.beta}
        metrics.append(rec)
        log.info("stage1 epoch %d: %s", epoch, rec)
        if on_epoch:
            on_epoch(rec)
        done = epoch + 1
        if out_dir and (done % cfg.checkpoint_every == 0 or done == stop):
            ckpt = stage1_checkpoint(model, opt, done, cfg, data_gen, metrics.records)
            last_saved = out_dir / f"stage1_epoch{done:04d}.ckpt"
            save_checkpoint(last_saved, ckpt)
            save_checkpoint(out_dir / "stage1.ckpt", ckpt)
    ckpt = stage1_checkpoint(model, opt, stop, cfg, data_gen, metrics.records)
    return Stage1Run(model, ckpt, metrics.records)


@dataclass
class Stage2Run:
    generator: Generator
    critic: Critic
    checkpoint: Checkpoint
    history: list


def canonicalize(stage1, posed, batch_size=32):
    """Stage One canonical predictions for a (N, 2, H, W) array or tensor."""
    x = posed if isinstance(posed, torch.Tensor) else _tensor(posed)
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(stage1(x[i:i + batch_size])[2])
    return torch.cat(outs) if outs else x.new_zeros(x.shape)


def reconstruct(generator, posed, canonical, batch_size=16):
    x = posed if isinstance(posed, torch.Tensor) else _tensor(posed)
    c = canonical if isinstance(canonical, torch.Tensor) else _tensor(canonical)
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(generator(x[i:i + batch_size], c[i:i + batch_size]))
    return torch.cat(outs)


def stage2_checkpoint(gen, critic, opt_g, opt_d, epoch, cfg, data_gen, gp_gen, history, stage1_fp):
    tensors = {f"generator/{k}": v.detach().clone() for k, v in gen.state_dict().items()}
    tensors.update({f"critic/{k}": v.detach().clone() for k, v in critic.state_dict().items()})
    state = {
        "opt_g": pack_state(opt_g.state_dict(), tensors, "optim_g"),
        "opt_d": pack_state(opt_d.state_dict(), tensors, "optim_d"),
        "data_rng": pack_state(data_gen.get_state(), tensors, "rng/data"),
        "gp_rng": pack_state(gp_gen.get_state(), tensors, "rng/gp"),
        "train_config": cfg.to_dict(),
        "history": history,
    }
    return Checkpoint(2, epoch, gen.cfg.to_dict(), model_fingerprint(gen, gen.cfg.fingerprint()), tensors, state,
                      stage1_fingerprint=stage1_fp)


def load_stage2_model(ckpt, stage1_fingerprint=None):
    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt, expect_stage=2, expect_stage1_fingerprint=stage1_fingerprint)
    elif stage1_fingerprint is not None and ckpt.stage1_fingerprint != stage1_fingerprint:
        raise FingerprintMismatchError("stage-two checkpoint was trained against a different stage-one model")
    gen = Generator(Stage2Config.from_dict(ckpt.config))
    gen.load_state_dict(ckpt.module_state("generator"))
    gen.eval()
    return gen


def train_stage2(data, split, stage1_ckpt, cfg, out_dir=None, resume=None, epochs=None, on_step=None,
                 on_epoch=None):
    """Fit the Stage Two generator (and critic) with Stage One frozen.

    ``on_step(tag)`` is called after every optimizer step (tag ``"critic"`` or
    ``"generator"``), which lets callers audit the frozen Stage One weights.
    """
    out_dir = Path(out_dir) if out_dir else None
    if isinstance(stage1_ckpt, (str, Path)):
        stage1_ckpt = load_checkpoint(stage1_ckpt, expect_stage=1)
    stage1 = load_stage1_model(stage1_ckpt)
    if tuple(stage1.cfg.input_resolution) != tuple(data.resolution):
        raise FingerprintMismatchError(
            f"dataset resolution {data.resolution} does not match the stage-one model's "
            f"{stage1.cfg.input_resolution}"
        )
    for p in stage1.parameters():
        p.requires_grad_(False)
    stage1_fp = model_fingerprint(stage1, stage1.cfg.fingerprint())
    if stage1_fp != stage1_ckpt.fingerprint:
        raise FingerprintMismatchError("stage-one checkpoint parameters do not match its fingerprint")

    fit_ids, val_ids = holdout_validation(split.train_samples, cfg.val_fraction, cfg.seed)
    fit, val = data.index_of(fit_ids), data.index_of(val_ids)
    posed = _tensor(data.posed)
    canon = canonicalize(stage1, posed)  # frozen and deterministic, so computed once
    voxels = _tensor(data.voxels)

    torch.manual_seed(cfg.seed + 2)
    gcfg = cfg.stage2_config(data.resolution, data.voxel_resolution)
    gen, critic = Generator(gcfg), Critic(gcfg)
    opt_g, opt_d = _adam(gen.parameters(), cfg), _adam(critic.parameters(), cfg)
    data_gen = torch.Generator().manual_seed(cfg.seed + 3)
    gp_gen = torch.Generator().manual_seed(cfg.seed + 4)
    history, start = [], 0
    if resume is not None:
        if isinstance(resume, (str, Path)):
            resume = load_checkpoint(resume, expect_stage=2, expect_stage1_fingerprint=stage1_fp)
        elif resume.stage1_fingerprint != stage1_fp:
            raise FingerprintMismatchError("resume checkpoint was trained against a different stage-one model")
        gen.load_state_dict(resume.module_state("generator"))
        critic.load_state_dict(resume.module_state("critic"))
        opt_g.load_state_dict(unpack_state(resume.state["opt_g"], resume.tensors))
        opt_d.load_state_dict(unpack_state(resume.state["opt_d"], resume.tensors))
        data_gen.set_state(unpack_state(resume.state["data_rng"], resume.tensors))
        gp_gen.set_state(unpack_state(resume.state["gp_rng"], resume.tensors))
        history, start = list(resume.state["history"]), resume.epoch
    metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir else None, history)
    metrics.rewrite()

    adversarial = cfg.use_discriminator and cfg.gamma < 1
    stop = cfg.stage2_epochs if epochs is None else min(cfg.stage2_epochs, start + epochs)
    last_saved = None
    for epoch in range(start, stop):
        gen.train()
        critic.train()
        sums = np.zeros(3)
        for idx in _batches(len(fit), cfg.batch_size, data_gen):
            idx = fit[idx.numpy()]
            x, c, real = posed[idx], canon[idx], voxels[idx]
            l_d = torch.zeros(())
            if adversarial:
                for _ in range(cfg.disc_steps_per_gen):
                    with torch.no_grad():
                        fake = gen(x, c)
                    gp = gradient_penalty(critic, fake, real, x, generator=gp_gen)
                    l_d = disc_loss(critic(fake, x), critic(real, x), gp, cfg.lambda_gp)
                    if not torch.isfinite(l_d):
                        raise DivergenceError(f"non-finite critic loss at epoch {epoch}", last_saved)
                    opt_d.zero_grad()
                    l_d.backward()
                    opt_d.step()
                    if on_step:
                        on_step("critic")
            logits = gen.logits(x, c)
            fake = squash(logits)
            l_bce = weighted_bce_with_logits(logits, real, cfg.alpha_bce)
            l_g = gen_loss(critic(fake, x)) if adversarial else torch.zeros(())
            loss = stage2_gen_objective(l_bce, l_g, cfg.gamma)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite generator loss at epoch {epoch}", last_saved)
            opt_g.zero_grad()
            loss.backward()
            opt_g.step()
            if on_step:
                on_step("generator")
            sums += np.array([l_bce.item(), l_g.item(), l_d.item()]) * len(idx)
        gen.eval()
        critic.eval()
        iou_val = float("nan")
        if len(val):
            pred = reconstruct(gen, posed[val], canon[val])
            iou_val = float(np.mean(batched_iou(pred.numpy(), data.voxels[val])))
        rec = {"epoch": epoch, "stage": 2, "l_bce": float(sums[0] / len(fit)), "l_g": float(sums[1] / len(fit)),
               "l_d": float(sums[2] / len(fit)), "iou_val": iou_val}
        metrics.append(rec)
        log.info("stage2 epoch %d: %s", epoch, rec)
        if on_epoch:
            on_epoch(rec)
        done = epoch + 1
        if out_dir and (done % cfg.checkpoint_every == 0 or done == stop):
            ckpt = stage2_checkpoint(gen, critic, opt_g, opt_d, done, cfg, data_gen, gp_gen, metrics.records,
                                     stage1_fp)
            last_saved = out_dir / f"stage2_epoch{done:04d}.ckpt"
            save_checkpoint(last_saved, ckpt)
            save_checkpoint(out_dir / "stage2.ckpt", ckpt)
    ckpt = stage2_checkpoint(gen, critic, opt_g, opt_d, stop, cfg, data_gen, gp_gen, metrics.records, stage1_fp)
    return Stage2Run(gen, critic, ckpt, metrics.records)
