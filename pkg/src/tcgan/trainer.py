"""Alternating generator / discriminator training, MSM pre-training and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import DataError, UnpairedDataset, augment, next_batch, resize
from .losses import (
    LossBundle,
    LossWeights,
    NonFiniteLossError,
    combine,
    identity_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    target_consistency,
    weighted_total,
)
from .networks import GeneratorPair, PatchDiscriminator, SelectionClassifier, build
from .tensors import compose_shadow_free

log = logging.getLogger(__name__)

CHECKPOINT_HEADER = "tcgan-ckpt-v1"
MSM_HEADER = "tcgan-msm-v1"


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 2e-4
    momentum1: float = 0.5
    momentum2: float = 0.999
    epochs_total: int = 200
    epochs_constant: int = 100
    batch_size: int = 1
    init_std: float = 0.02
    lambda1: float = 1.0
    lambda2: float = 40.0
    lambda3: float = 5.0
    # epochs over which lambda2 ramps up linearly from 0; 0 means constant
    lambda2_warmup_epochs: int = 0
    seed: int = 0
    # network init seeds; None derives them from ``seed``
    seed_g1: int | None = None
    seed_g2: int | None = None
    seed_d1: int | None = None
    seed_d2: int | None = None
    seed_msm: int | None = None
    load_size: int = 286
    crop_size: int = 256
    flip: bool = False
    gen_channels: int = 64
    gen_blocks: int = 9
    disc_channels: int = 64
    checkpoint_every: int = 10
    msm_channels: int = 64
    msm_epochs: int = 10
    msm_batch_size: int = 8
    msm_holdout: float = 0.2

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.epochs_constant <= self.epochs_total:
            raise ValueError("need 0 <= epochs_constant <= epochs_total")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_size > self.load_size or self.crop_size % 8:
            raise ValueError("crop_size must be a multiple of 8 and not exceed load_size")
        if self.lambda2_warmup_epochs < 0:
            raise ValueError("lambda2_warmup_epochs must be >= 0")
        if not 0 < self.msm_holdout < 1:
            raise ValueError("msm_holdout must be in (0, 1)")
        self.weights  # validates the lambdas

    def init_seed(self, name: str) -> int:
        """Seed for network ``name`` (``g1``, ``g2``, ``d1``, ``d2`` or ``msm``)."""
        explicit = getattr(self, f"seed_{name}")
        if explicit is not None:
            return explicit
        k = ("g1", "g2", "d1", "d2", "msm").index(name)
        return int(np.random.SeedSequence([self.seed, k]).generate_state(1)[0])

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small preset that trains on 64x64 images on a single CPU core."""
        base = dict(epochs_total=30, epochs_constant=15, load_size=72, crop_size=64, lambda2_warmup_epochs=5,
                    gen_channels=16, disc_channels=16, msm_channels=16, checkpoint_every=0)
        base.update(overrides)
        return cls(**base)

    def weights_at(self, epoch: int) -> LossWeights:
        """Loss weights in effect during ``epoch`` (1-based), after the lambda2 warm-up."""
        if self.lambda2_warmup_epochs == 0:
            return self.weights
        frac = min(1.0, (epoch - 1) / self.lambda2_warmup_epochs)
        return LossWeights(self.lambda1, self.lambda2 * frac, self.lambda3)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Constant learning rate, then a linear ramp to zero at the last epoch (1-based)."""
    if not 1 <= epoch <= cfg.epochs_total:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs_total}")
    if epoch <= cfg.epochs_constant:
        return cfg.base_lr
    return cfg.base_lr * (cfg.epochs_total - epoch) / (cfg.epochs_total - cfg.epochs_constant)


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.base_lr, betas=(cfg.momentum1, cfg.momentum2))


class TrainState:
    """Networks, optimisers, counters and the data RNG of one training run."""

    def __init__(self, cfg: TrainConfig, allow_same_seed: bool = False):
        self.cfg = cfg
        self.gens = GeneratorPair(cfg.init_seed("g1"), cfg.init_seed("g2"), cfg.gen_channels,
                                  cfg.gen_blocks, cfg.init_std, allow_same_seed=allow_same_seed)
        self.d1 = build(PatchDiscriminator, cfg.init_seed("d1"), cfg.init_std, cfg.disc_channels)
        self.d2 = build(PatchDiscriminator, cfg.init_seed("d2"), cfg.init_std, cfg.disc_channels)
        # L_tc couples the generators, so both are updated by a single optimiser
        self.opt_g = _adam(self.gens.parameters(), cfg)
        self.opt_d = _adam(list(self.d1.parameters()) + list(self.d2.parameters()), cfg)
        self.epoch = 0
        self.iteration = 0
        self.rng = np.random.default_rng(cfg.seed)

    @property
    def weights(self) -> LossWeights:
        """Weights for the epoch currently being trained."""
        return self.cfg.weights_at(min(self.epoch + 1, self.cfg.epochs_total))

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    # checkpoints ------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "header": CHECKPOINT_HEADER,
            "config": asdict(self.cfg),
            "g1": self.gens.g1.state_dict(),
            "g2": self.gens.g2.state_dict(),
            "d1": self.d1.state_dict(),
            "d2": self.d2.state_dict(),
            "msm": None,
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "epoch": self.epoch,
            "iteration": self.iteration,
            "seeds": (self.gens.seed1, self.gens.seed2),
            "rng": self.rng.bit_generator.state,
        }

    def save(self, path: str | os.PathLike, msm: SelectionClassifier | None = None) -> None:
        state = self.state_dict()
        if msm is not None:
            state["msm"] = msm.state_dict()
        _atomic_torch_save(state, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainState":
        ckpt = read_checkpoint(path)
        cfg = TrainConfig(**ckpt["config"])
        s1, s2 = ckpt["seeds"]
        state = cls(cfg, allow_same_seed=s1 == s2)
        state.gens.g1.load_state_dict(ckpt["g1"])
        state.gens.g2.load_state_dict(ckpt["g2"])
        state.d1.load_state_dict(ckpt["d1"])
        state.d2.load_state_dict(ckpt["d2"])
        state.opt_g.load_state_dict(ckpt["opt_g"])
        state.opt_d.load_state_dict(ckpt["opt_d"])
        state.epoch = ckpt["epoch"]
        state.iteration = ckpt["iteration"]
        state.rng.bit_generator.state = ckpt["rng"]
        return state


def _atomic_torch_save(obj, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("header") != CHECKPOINT_HEADER:
        raise DataError(f"{path} is not a {CHECKPOINT_HEADER} checkpoint")
    return ckpt


def load_generators(path: str | os.PathLike) -> GeneratorPair:
    ckpt = read_checkpoint(path)
    cfg = ckpt["config"]
    s1, s2 = ckpt["seeds"]
    gens = GeneratorPair(s1, s2, cfg["gen_channels"], cfg["gen_blocks"], cfg["init_std"],
                         allow_same_seed=s1 == s2)
    gens.g1.load_state_dict(ckpt["g1"])
    gens.g2.load_state_dict(ckpt["g2"])
    return gens.eval()


def _set_trainable(net: torch.nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)


def train_step(state: TrainState, batch) -> tuple[TrainState, LossBundle]:
    """One generator update on both generators, then one discriminator update.

    Returns the state (updated in place) and the generator-phase losses.
    Raises :class:`NonFiniteLossError` naming the first non-finite term.
    """
    g = state.gens
    x, y1, y2 = batch.x, batch.y1, batch.y2

    _set_trainable(state.d1, False)
    _set_trainable(state.d2, False)
    r1, r2 = g.g1(x), g.g2(x)
    fake1, fake2 = compose_shadow_free(x, r1), compose_shadow_free(x, r2)
    gan1 = lsgan_generator_loss(state.d1(fake1))
    gan2 = lsgan_generator_loss(state.d2(fake2))
    tc = target_consistency(x, r1, r2)
    idt1 = identity_loss(g.g1(y1))
    idt2 = identity_loss(g.g2(y2))
    w = state.weights
    bundle = combine(w, gan1, gan2, tc, idt1, idt2)  # raises on NaN/inf
    total = weighted_total(w, gan1, gan2, tc, idt1, idt2)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    _set_trainable(state.d1, True)
    _set_trainable(state.d2, True)

    loss_d1 = lsgan_discriminator_loss(state.d1(y1), state.d1(fake1.detach()))
    loss_d2 = lsgan_discriminator_loss(state.d2(y2), state.d2(fake2.detach()))
    for name, v in (("d1", loss_d1), ("d2", loss_d2)):
        if not torch.isfinite(v):
            raise NonFiniteLossError(name, float(v))
    state.opt_d.zero_grad(set_to_none=True)
    (loss_d1 + loss_d2).backward()
    state.opt_d.step()

    state.iteration += 1
    return state, bundle


def iterations_per_epoch(cfg: TrainConfig, ds: UnpairedDataset) -> int:
    return math.ceil(len(ds.shadow_paths) / cfg.batch_size)


def train(
    cfg: TrainConfig,
    dataset: UnpairedDataset,
    out_dir: str | os.PathLike | None = None,
    state: TrainState | None = None,
    on_epoch=None,
) -> TrainState:
    """Run the full schedule, resuming from ``state`` if given.

    With ``out_dir`` set, per-iteration losses go to ``losses.csv``, the
    per-epoch learning rate to ``lr.csv``, and checkpoints are written every
    ``checkpoint_every`` epochs and at the end.
    """
    if len(dataset.nonshadow_paths) < 2:
        raise DataError("training needs at least two shadow-free images: each step feeds two "
                        "distinct real samples, one to each discriminator")
    state = state or TrainState(cfg)
    cfg = state.cfg
    out = Path(out_dir) if out_dir is not None else None
    loss_writer = lr_writer = None
    files = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        resuming = state.iteration > 0
        lf = open(out / "losses.csv", "a" if resuming else "w", newline="")
        rf = open(out / "lr.csv", "a" if resuming else "w", newline="")
        files = [lf, rf]
        loss_writer, lr_writer = csv.writer(lf), csv.writer(rf)
        if not resuming:
            loss_writer.writerow(LossBundle.CSV_HEADER)
            lr_writer.writerow(("epoch", "lr"))
    try:
        n_iter = iterations_per_epoch(cfg, dataset)
        for epoch in range(state.epoch + 1, cfg.epochs_total + 1):
            lr = lr_schedule(cfg, epoch)
            state.set_lr(lr)
            if lr_writer:
                lr_writer.writerow((epoch, lr))
            running = np.zeros(6)
            for _ in range(n_iter):
                batch = next_batch(dataset, state.rng, cfg.batch_size, cfg.load_size, cfg.crop_size, cfg.flip)
                _, bundle = train_step(state, batch)
                running += [bundle.gan1, bundle.gan2, bundle.tc, bundle.idt1, bundle.idt2, bundle.total]
                if loss_writer:
                    loss_writer.writerow(bundle.csv_row(state.iteration))
            state.epoch = epoch
            mean = running / n_iter
            log.info("epoch %d lr %.2e gan %.3f/%.3f tc %.4f idt %.4f/%.4f total %.3f",
                     epoch, lr, *mean)
            if on_epoch is not None:
                on_epoch(state, mean)
            if out is not None:
                for f in files:
                    f.flush()
                last = epoch == cfg.epochs_total
                if last or (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0):
                    state.save(out / ("final.ckpt" if last else f"epoch{epoch:04d}.ckpt"))
    finally:
        for f in files:
            f.close()
    return state


# --------------------------------------------------------------------------
# model-selection classifier


@dataclass
class MsmResult:
    model: SelectionClassifier
    holdout_accuracy: float
    train_loss: float


def _msm_input(img: torch.Tensor, size: int) -> torch.Tensor:
    return img if tuple(img.shape[-2:]) == (size, size) else resize(img, size)


def train_msm(cfg: TrainConfig, shadow: list[torch.Tensor], nonshadow: list[torch.Tensor]) -> MsmResult:
    """Pre-train the shadow / shadow-free classifier with binary cross-entropy.

    Shadow-free images are labelled 1. A ``msm_holdout`` fraction of each set
    is held out and the held-out accuracy is reported.
    """
    rng = np.random.default_rng([cfg.seed, cfg.init_seed("msm")])
    splits = []
    for imgs in (shadow, nonshadow):
        n = len(imgs)
        n_hold = int(round(n * cfg.msm_holdout))
        if n_hold < 1 or n - n_hold < 1:
            raise DataError(f"cannot split {n} images into train and held-out parts")
        order = rng.permutation(n)
        splits.append(([imgs[i] for i in order[n_hold:]], [imgs[i] for i in order[:n_hold]]))
    (s_tr, s_ho), (n_tr, n_ho) = splits
    train_items = [(t, 0.0) for t in s_tr] + [(t, 1.0) for t in n_tr]

    model = build(SelectionClassifier, cfg.init_seed("msm"), cfg.init_std, cfg.msm_channels)
    opt = _adam(model.parameters(), cfg)
    bce = torch.nn.BCEWithLogitsLoss()
    loss_sum = 0.0
    for _ in range(cfg.msm_epochs):
        order = rng.permutation(len(train_items))
        loss_sum, n_batches = 0.0, 0
        for start in range(0, len(order), cfg.msm_batch_size):
            idx = order[start:start + cfg.msm_batch_size]
            xb = torch.stack([augment(train_items[i][0], rng, cfg.load_size, cfg.crop_size, cfg.flip)
                              for i in idx])
            yb = torch.tensor([train_items[i][1] for i in idx])
            loss = bce(model.logits(xb), yb)
            if not torch.isfinite(loss):
                raise NonFiniteLossError("msm_bce", float(loss))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += loss.item()
            n_batches += 1
        loss_sum /= max(n_batches, 1)
    model.eval()
    acc = msm_accuracy(model, s_ho, n_ho, cfg.crop_size)
    return MsmResult(model, acc, loss_sum)


@torch.no_grad()
def msm_accuracy(model: SelectionClassifier, shadow, nonshadow, size: int) -> float:
    correct = 0
    for imgs, label in ((shadow, 0), (nonshadow, 1)):
        for start in range(0, len(imgs), 32):
            xb = torch.stack([_msm_input(t, size) for t in imgs[start:start + 32]])
            pred = (model(xb) >= 0.5).long()
            correct += int((pred == label).sum())
    return correct / (len(shadow) + len(nonshadow))


def save_msm(model: SelectionClassifier, path, base_channels: int, accuracy: float | None = None) -> None:
    _atomic_torch_save({"header": MSM_HEADER, "base_channels": base_channels,
                        "state": model.state_dict(), "holdout_accuracy": accuracy}, path)


def load_msm(path) -> SelectionClassifier:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if isinstance(blob, dict) and blob.get("header") == CHECKPOINT_HEADER and blob.get("msm") is not None:
        ch = blob["config"]["msm_channels"]
        state = blob["msm"]
    elif isinstance(blob, dict) and blob.get("header") == MSM_HEADER:
        ch, state = blob["base_channels"], blob["state"]
    else:
        raise DataError(f"{path} holds no selection classifier")
    model = build(SelectionClassifier, 0, 0.02, ch)
    model.load_state_dict(state)
    return model.eval()


def config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(TrainConfig)}
