"""Noise-prediction training with continuous noise levels.

Each example draws a step ``t``, a sqrt-level between the step's schedule
boundaries and a Gaussian ``eps``; the network must recover ``eps`` from the
corrupted clean patch and the noisy observation.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .diffusion import DEFAULT_BETA_1, DEFAULT_BETA_T, DEFAULT_STEPS, make_schedule, sample_noise_level
from .errors import ConfigError, TrainingFault
from .model import ModelConfig, init_params

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "wall_time")


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 96
    lr0: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_every: int = 150
    seed: int = 0
    val_seed: int = 20240101
    T: int = DEFAULT_STEPS
    beta_1: float = DEFAULT_BETA_1
    beta_T: float = DEFAULT_BETA_T
    model: dict = field(default_factory=dict)
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr_decay_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not (self.lr0 > 0 and 0 < self.lr_decay <= 1):
            raise ConfigError("need lr0 > 0 and 0 < lr_decay <= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        if isinstance(self.model, ModelConfig):
            self.model = self.model.to_dict()
        self.adam_betas = tuple(self.adam_betas)
        self.model_config()  # validate early

    def model_config(self):
        return ModelConfig.from_dict(self.model)

    def schedule(self):
        return make_schedule(self.T, self.beta_1, self.beta_T)

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["model"] = self.model_config().to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: cannot read training config ({exc})") from exc


def lr_at(epoch, config):
    """Step decay: ``lr0 * lr_decay ** (epoch // lr_decay_every)`` (0-based epoch)."""
    return config.lr0 * config.lr_decay ** (epoch // config.lr_decay_every)


def _tensor(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def diffusion_loss(model, clean, noisy, schedule, generator=None):
    """Batch mean of ``||eps - eps_hat||^2`` (summed over samples).

    Draw order per call: steps, sqrt-levels, then ``eps``.
    """
    n = clean.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if clean.shape != noisy.shape:
        raise ValueError(f"shape mismatch: {tuple(clean.shape)} vs {tuple(noisy.shape)}")
    t = torch.randint(1, schedule.T + 1, (n,), generator=generator)
    level = sample_noise_level(t, schedule, generator)
    eps = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
    s = level.to(clean.dtype).unsqueeze(1)
    x_t = s * clean + torch.sqrt(1.0 - s * s) * eps
    eps_hat = model(x_t, noisy, level)
    return ((eps - eps_hat) ** 2).sum(dim=1).mean()


def loss_step(clean, noisy, model, schedule, generator=None):
    """Loss and parameter gradients for one batch (gradients are fresh tensors)."""
    model.zero_grad(set_to_none=True)
    loss = diffusion_loss(model, clean, noisy, schedule, generator)
    if not torch.isfinite(loss):
        raise TrainingFault(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for name, p in model.named_parameters()}
    return float(loss.detach()), grads


@torch.no_grad()
def validate(model, patches, schedule, seed, batch_size=96):
    """Mean loss over ``patches`` under a fixed draw stream."""
    if len(patches) == 0:
        raise ValueError("validation set is empty")
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(int(seed))
    total = 0.0
    for start in range(0, len(patches), batch_size):
        clean = _tensor(patches.clean[start:start + batch_size], dtype)
        noisy = _tensor(patches.noisy[start:start + batch_size], dtype)
        total += float(diffusion_loss(model, clean, noisy, schedule, gen)) * clean.shape[0]
    return total / len(patches)


@dataclass
class TrainResult:
    model: torch.nn.Module
    schedule: object
    best_val_loss: float
    best_epoch: int
    history: list
    config: TrainConfig
    checkpoint_path: Path | None = None

    def metadata(self):
        return {
            "train_config": self.config.to_dict(),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "epochs_run": len(self.history),
        }


def train(config, splits, out_dir=None, progress=None):
    """Train on ``splits.train``, select the epoch with the lowest val loss.

    The test split is never read. With ``out_dir`` the run writes
    ``train_log.csv``, ``best.ckpt`` and optional periodic checkpoints.
    ``progress(row)`` is called once per epoch.
    """
    train_set, val_set = splits.train, splits.val
    if len(train_set) < config.batch_size:
        raise ConfigError(f"{len(train_set)} training patches < batch size {config.batch_size}")
    if len(val_set) == 0:
        raise ConfigError("validation split is empty")
    schedule = config.schedule()
    model = init_params(config.model_config(), config.seed)
    model.train()
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=config.lr0, betas=config.adam_betas,
                           eps=config.adam_eps, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(int(config.seed))
    clean_all = _tensor(train_set.clean, dtype)
    noisy_all = _tensor(train_set.noisy, dtype)

    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / "train_log.csv").open("w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    best_state, best_val, best_epoch = None, math.inf, -1
    history = []
    t0 = time.perf_counter()
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            for group in opt.param_groups:
                group["lr"] = lr
            order = torch.randperm(len(train_set), generator=gen)
            running, seen = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                last_good = copy.deepcopy(model.state_dict())
                try:
                    loss, _ = loss_step(clean_all[idx], noisy_all[idx], model, schedule, gen)
                except TrainingFault as fault:
                    raise _fault(fault, model, last_good, schedule, config, out_dir, epoch)
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                running += loss * len(idx)
                seen += len(idx)
            model.eval()
            val = validate(model, val_set, schedule, config.val_seed, config.batch_size)
            model.train()
            if not math.isfinite(val):
                raise _fault(TrainingFault(f"non-finite validation loss at epoch {epoch}"),
                             model, best_state or model.state_dict(), schedule, config, out_dir,
                             epoch)
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_state = copy.deepcopy(model.state_dict())
            row = {"epoch": epoch, "train_loss": running / seen, "val_loss": val, "lr": lr,
                   "wall_time": time.perf_counter() - t0}
            history.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in LOG_COLUMNS])
                log_fh.flush()
            if out_dir is not None and config.checkpoint_every and \
                    (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"epoch_{epoch + 1:04d}.ckpt", model, schedule,
                                {"train_config": config.to_dict(), "epoch": epoch})
            log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, row["train_loss"], val, lr)
            if progress is not None:
                progress(row)
    finally:
        if writer is not None:
            log_fh.close()

    model.load_state_dict(best_state)
    model.eval()
    result = TrainResult(model, schedule, best_val, best_epoch, history, config)
    if out_dir is not None:
        result.checkpoint_path = save_checkpoint(out_dir / "best.ckpt", model, schedule,
                                                 result.metadata())
    return result


def _fault(fault, model, good_state, schedule, config, out_dir, epoch):
    path = None
    if out_dir is not None:
        model.load_state_dict(good_state)
        path = save_checkpoint(out_dir / "last_good.ckpt", model, schedule,
                               {"train_config": config.to_dict(), "epoch": epoch,
                                "fault": str(fault)})
    return TrainingFault(f"training diverged at epoch {epoch}: {fault}", path)
