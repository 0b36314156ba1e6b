"""Losses, Adam, and the alternating generator/discriminator training loop."""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .core import DatasetManifest, child_seed, make_rng
from .exceptions import InvalidConfigError, InvalidInputError, TrainingDivergedError
from .networks import (DiscriminatorConfig, GeneratorConfig, build_discriminator,
                       build_generator, build_unet, save_checkpoint)
from .validation import check_pair_arrays

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
LOSS_LOG_COLUMNS = ("step", "loss_D", "loss_G_total", "loss_G_gan", "loss_G_l1", "wall_ms")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr_G: float = 2e-4
    lr_D: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_l1: float = 100.0
    lambda_gan: float = 1.0
    latent_dim: int = 16
    depth: int = 8
    base_width: int = 32
    log_every: int = 1
    checkpoint_path: str = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.lambda_l1 < 0 or self.lambda_gan < 0:
            raise InvalidConfigError("loss weights must be non-negative")
        if self.lr_G <= 0 or self.lr_D <= 0:
            raise InvalidConfigError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfigError("betas must lie in [0, 1)")
        if self.log_every < 1:
            raise InvalidConfigError("log_every must be >= 1")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def generator_config(self, input_size):
        return GeneratorConfig(depth=self.depth, base_width=self.base_width,
                               latent_dim=self.latent_dim, input_size=input_size)

    def discriminator_config(self):
        return DiscriminatorConfig(base_width=self.base_width)


@dataclass
class LossRecord:
    step: int
    loss_D: float
    loss_G_total: float
    loss_G_gan: float
    loss_G_l1: float
    wall_ms: float

    def is_finite(self):
        return all(math.isfinite(v) for v in (self.loss_D, self.loss_G_total,
                                                self.loss_G_gan, self.loss_G_l1))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _logits(x, name):
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    if not torch.isfinite(t).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return t.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


def loss_discriminator(logits_real, logits_fake):
    """``-mean log sigmoid(real) - mean log(1 - sigmoid(fake))`` in log-sigmoid form."""
    real = _logits(logits_real, "logits_real")
    fake = _logits(logits_fake, "logits_fake")
    if real.shape != fake.shape:
        raise InvalidInputError(f"logit maps differ in shape: {tuple(real.shape)} vs {tuple(fake.shape)}")
    # log(1 - sigmoid(x)) == logsigmoid(-x)
    return -F.logsigmoid(real).mean() - F.logsigmoid(-fake).mean()


def loss_generator_gan(logits_fake):
    """Non-saturating generator loss ``-mean log sigmoid(fake)``."""
    return -F.logsigmoid(_logits(logits_fake, "logits_fake")).mean()


def loss_l1(pred, target):
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise InvalidInputError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    return (pred - target.to(pred.dtype)).abs().mean()


def loss_generator_total(gan, l1, cfg=None):
    lambda_gan = cfg.lambda_gan if cfg is not None else 1.0
    lambda_l1 = cfg.lambda_l1 if cfg is not None else 100.0
    return lambda_gan * gan + lambda_l1 * l1


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: object = 0.0
    v: object = 0.0
    t: int = 0


def adam_update(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step; returns ``(new_param, new_state)``.

    Works on floats, numpy arrays and torch tensors alike; inputs are not
    modified.
    """
    finite = torch.isfinite(grad).all() if torch.is_tensor(grad) else np.all(np.isfinite(grad))
    if not finite:
        raise InvalidInputError("gradient contains non-finite values")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    sqrt = torch.sqrt if torch.is_tensor(v_hat) else np.sqrt
    new_param = param - lr * m_hat / (sqrt(v_hat) + eps)
    return new_param, AdamState(m=m, v=v, t=t)


class Adam(torch.optim.Optimizer):
    """torch optimizer whose step is :func:`adam_update` applied per parameter."""

    def __init__(self, params, lr=2e-4, betas=(0.5, 0.999), eps=1e-8):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            b1, b2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                st = self.state.setdefault(p, {"adam": AdamState(
                    m=torch.zeros_like(p), v=torch.zeros_like(p), t=0)})
                new_p, st["adam"] = adam_update(p, p.grad, st["adam"], group["lr"], b1, b2,
                                                group["eps"])
                p.copy_(new_p)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def _dataset_arrays(dataset):
    if isinstance(dataset, DatasetManifest):
        X, Y = dataset.load_arrays()
    elif isinstance(dataset, (str, Path)):
        X, Y = DatasetManifest.load(dataset).load_arrays()
    else:
        X, Y = dataset
    if len(X) == 0:
        raise InvalidInputError("training dataset is empty")
    X, Y = check_pair_arrays(X, Y)
    if X.shape[1] != X.shape[2]:
        raise InvalidInputError("training images must be square")
    return torch.from_numpy(X[:, None]), torch.from_numpy(Y[:, None])


class _BatchSampler:
    """Epoch-wise shuffled mini-batches; epoch ``e`` order from ``(seed, "shuffle", e)``."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.seed = seed
        self._epoch = -1
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        idx = []
        while len(idx) < self.batch_size:
            if self._pos >= len(self._order):
                self._epoch += 1
                self._order = make_rng(self.seed, "shuffle", self._epoch).permutation(self.n)
                self._pos = 0
            take = min(self.batch_size - len(idx), len(self._order) - self._pos)
            idx.extend(self._order[self._pos:self._pos + take].tolist())
            self._pos += take
        return torch.as_tensor(idx)


class TrainResult(NamedTuple):
    model: torch.nn.Module
    log: list
    discriminator: torch.nn.Module = None


def _check_record(rec, log):
    if not rec.is_finite():
        log.append(rec)
        raise TrainingDivergedError(f"non-finite loss at step {rec.step}: {rec}", record=rec)


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

def train_genfab(dataset, cfg, callback=None):
    """Alternating D-then-G optimisation of the noise-injected generator.

    ``dataset`` is a :class:`DatasetManifest`, a manifest path, or an
    ``(X, Y)`` pair of (N, H, W) arrays. A fresh latent is drawn for every
    example at every step. When ``lambda_gan == 0`` the discriminator is
    evaluated for logging but never updated.
    """
    X, Y = _dataset_arrays(dataset)
    size = X.shape[-1]
    G = build_generator(cfg.generator_config(size), child_seed(cfg.seed, "G", 0)).train()
    D = build_discriminator(cfg.discriminator_config(), child_seed(cfg.seed, "D", 0)).train()
    opt_G = Adam(G.parameters(), lr=cfg.lr_G, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    opt_D = Adam(D.parameters(), lr=cfg.lr_D, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    sampler = _BatchSampler(len(X), cfg.batch_size, child_seed(cfg.seed, "batches", 0))
    update_D = cfg.lambda_gan > 0
    log = []

    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        idx = sampler.next()
        x, y = X[idx], Y[idx]
        z = torch.from_numpy(make_rng(cfg.seed, "z_train", step)
                             .standard_normal((len(idx), cfg.latent_dim)).astype(np.float32))
        fake = G(x, z)

        if update_D:
            loss_D = loss_discriminator(D(x, y), D(x, fake.detach()))
            if not math.isfinite(loss_D.item()):
                nan = float("nan")
                _check_record(LossRecord(step, loss_D.item(), nan, nan, nan, 0.0), log)
            opt_D.zero_grad(set_to_none=True)
            loss_D.backward()
            opt_D.step()
        else:
            with torch.no_grad():
                loss_D = loss_discriminator(D(x, y), D(x, fake))

        gan = loss_generator_gan(D(x, fake))
        l1 = loss_l1(fake, y)
        total = loss_generator_total(gan, l1, cfg)
        rec = LossRecord(step, loss_D.item(), total.item(), gan.item(), l1.item(),
                         (time.perf_counter() - t0) * 1e3)
        _check_record(rec, log)
        opt_G.zero_grad(set_to_none=True)
        total.backward()
        opt_G.step()
        if step % cfg.log_every == 0 or step == 1:
            log.append(rec)
            if callback is not None:
                callback(rec)

    G.eval()
    D.eval()
    if cfg.checkpoint_path:
        save_checkpoint(G, cfg.checkpoint_path, {"train_config": cfg.to_dict()})
    return TrainResult(G, log, D)


def train_unet(dataset, cfg, dropout_p=0.0, seed=None, callback=None):
    """Train the baseline U-Net with the L1 loss only.

    Dropout (when ``dropout_p > 0``) is active during training, each step
    using its own seeded mask.
    """
    seed = cfg.seed if seed is None else seed
    X, Y = _dataset_arrays(dataset)
    size = X.shape[-1]
    net = build_unet(cfg.generator_config(size), dropout_p, child_seed(seed, "U", 0)).train()
    opt = Adam(net.parameters(), lr=cfg.lr_G, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    sampler = _BatchSampler(len(X), cfg.batch_size, child_seed(seed, "batches", 0))
    log = []
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        idx = sampler.next()
        if dropout_p > 0:
            gen = torch.Generator().manual_seed(child_seed(seed, "dropout_train", step) >> 1)
            net.set_dropout(True, gen)
        out = net(X[idx])
        net.set_dropout(False)
        l1 = loss_l1(out, Y[idx])
        val = l1.item()
        rec = LossRecord(step, 0.0, cfg.lambda_l1 * val, 0.0, val,
                         (time.perf_counter() - t0) * 1e3)
        _check_record(rec, log)
        opt.zero_grad(set_to_none=True)
        l1.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == 1:
            log.append(rec)
            if callback is not None:
                callback(rec)
    net.eval()
    if cfg.checkpoint_path:
        save_checkpoint(net, cfg.checkpoint_path, {"train_config": cfg.to_dict(),
                                                   "seed": seed})
    return TrainResult(net, log)


def train_ensemble(dataset, cfg, K, base_seed=None, dropout_p=0.0):
    """``K`` independent U-Nets; member ``k`` uses child seed ``(base_seed, "member", k)``."""
    if K < 1:
        raise InvalidConfigError("K must be >= 1")
    base_seed = cfg.seed if base_seed is None else base_seed
    member_cfg = TrainConfig.from_dict({**cfg.to_dict(), "checkpoint_path": None})
    results = []
    for k in range(K):
        seed = child_seed(base_seed, "member", k)
        logger.info("training ensemble member %d/%d", k + 1, K)
        results.append(train_unet(dataset, member_cfg, dropout_p, seed))
    return results


# --------------------------------------------------------------------------
# loss log CSV
# --------------------------------------------------------------------------

def write_loss_log(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_LOG_COLUMNS)
        for r in records:
            writer.writerow([r.step, repr(r.loss_D), repr(r.loss_G_total), repr(r.loss_G_gan),
                             repr(r.loss_G_l1), f"{r.wall_ms:.3f}"])


def read_loss_log(path):
    """Parse a loss-log CSV; malformed rows raise with their line number."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InvalidInputError(f"{path}: empty loss log")
        missing = [c for c in LOSS_LOG_COLUMNS if c not in header]
        if missing:
            raise InvalidInputError(f"{path}: missing column(s) {', '.join(missing)}")
        col = {name: header.index(name) for name in LOSS_LOG_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                records.append(LossRecord(
                    step=int(row[col["step"]]),
                    **{c: float(row[col[c]]) for c in LOSS_LOG_COLUMNS[1:]}))
            except ValueError as exc:
                raise InvalidInputError(f"{path}: malformed row at line {lineno}: {exc}") from exc
    return records
