"""Supervised training loop for the two-stream classifier.

One call to :func:`train` owns all randomness for a run through named
streams of the run seed: "batch-order" shuffles epochs, "train-missing/*"
fixes which samples count as incomplete under an induced rate, and
"random-replace" draws the per-epoch substitutions. Two calls with the
same arguments produce bit-identical parameters.

Samples flagged incomplete (naturally or by schedule) always have the
absent modality substituted with its learned token; complete samples are
substituted at random per the policy, re-drawn every epoch, so the model
sees the same sample both ways across epochs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DataError
from .missing import MmtBank, TrainMissingPolicy, random_replace, replace_with_mmt
from .model import (
    MODALITIES,
    MbtParameters,
    embed_content,
    forward,
    forward_full_sa,
    unimodal_forward,
)
from .optim import AdamW
from .protocol import build_schedule, class_weights, weighted_cross_entropy
from .rng import Stream
from .synthdata import SynthDataset


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for one supervised run."""

    epochs: int = 16
    batch_size: int = 64
    base_lr: float = 3e-3
    weight_decay: float = 0.02
    warmup_frac: float = 0.1
    replace_probs: dict = field(default_factory=dict)
    induced_missing: dict = field(default_factory=dict)
    arch: str = "bottleneck"
    use_class_weights: bool = False
    filter_incomplete: bool = False
    train_mmt: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac outside [0, 1)")
        if self.arch not in ("bottleneck", "full_sa") and not (
            self.arch.startswith("unimodal:") and self.arch.split(":", 1)[1] in MODALITIES
        ):
            raise ConfigError(f"unknown arch {self.arch!r}")
        for m, r in self.induced_missing.items():
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r} in induced_missing")
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"induced_missing[{m!r}] = {r} outside [0, 1]")
        TrainMissingPolicy(self.replace_probs)  # validates probabilities

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    history: list  # per-epoch {"epoch", "loss", "lr"}
    steps: int
    kept: int  # training samples after any filtering
    seconds: float


def training_missing_masks(ds: SynthDataset, tcfg: TrainConfig, seed: int) -> dict:
    """Which samples count as incomplete during training, per modality.

    Natural absences are always included; an induced rate extends them
    through a cumulative schedule on its own named stream.
    """
    masks = {}
    for m in MODALITIES:
        rate = tcfg.induced_missing.get(m)
        if rate is None:
            masks[m] = ds.missing[m].copy()
        else:
            schedule = build_schedule(ds.missing[m], seed, f"train-missing/{m}")
            masks[m] = schedule.mask_at(rate)
    return masks


def train(
    params: MbtParameters,
    bank: MmtBank | None,
    ds: SynthDataset,
    tcfg: TrainConfig,
    seed: int,
) -> TrainResult:
    started = time.time()
    cfg = params.config
    masks = training_missing_masks(ds, tcfg, seed)

    ids = np.arange(len(ds))
    if tcfg.filter_incomplete:
        keep = np.ones(len(ds), dtype=bool)
        for m in MODALITIES:
            keep &= ~masks[m]
        ids = ids[keep]
        if len(ids) == 0:
            raise DataError("filtering incomplete samples left nothing to train on")
    else:
        any_missing = np.zeros(len(ds), dtype=bool)
        for m in MODALITIES:
            any_missing |= masks[m]
        if any_missing.any() and (bank is None or not tcfg.train_mmt):
            raise ConfigError(
                "incomplete training samples need the token bank; "
                "filter them out or enable train_mmt"
            )

    labels = ds.labels[ids]
    natural = {m: masks[m][ids] for m in MODALITIES}
    policy = TrainMissingPolicy(tcfg.replace_probs)

    weights = None
    if tcfg.use_class_weights:
        weights = [
            class_weights(labels[:, h], c) for h, c in enumerate(cfg.n_classes)
        ]

    plist = params.parameter_list()
    no_decay = set(params.no_decay_ids())
    if bank is not None and tcfg.train_mmt:
        bank_params = bank.parameter_list()
        plist = plist + bank_params
        no_decay |= {id(t) for t in bank_params}
    n = len(ids)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    opt = AdamW(
        plist,
        base_lr=tcfg.base_lr,
        warmup_steps=min(max(1, int(tcfg.warmup_frac * total_steps)), total_steps - 1),
        total_steps=total_steps,
        weight_decay=tcfg.weight_decay,
        no_decay=frozenset(no_decay),
    )

    order_stream = Stream(seed, "batch-order")
    replace_stream = Stream(seed, "random-replace")
    if tcfg.arch.startswith("unimodal:"):
        arch_modalities: tuple[str, ...] = (tcfg.arch.split(":", 1)[1],)
    else:
        arch_modalities = MODALITIES

    history = []
    for epoch in range(tcfg.epochs):
        perm = list(range(n))
        order_stream.shuffle(perm)
        perm = np.asarray(perm)
        epoch_natural = {m: natural[m][perm] for m in MODALITIES}
        replaced = random_replace(policy, replace_stream, epoch_natural)
        epoch_loss = 0.0
        lr = opt.lr
        for lo in range(0, n, tcfg.batch_size):
            sel = perm[lo : lo + tcfg.batch_size]
            batch_ids = ids[sel]
            with Tape() as tape:
                content = {}
                for m in arch_modalities:
                    emb = embed_content(params, m, ds.patches(m)[batch_ids])
                    flags = replaced[m][lo : lo + tcfg.batch_size]
                    if flags.any():
                        emb = replace_with_mmt(bank, m, emb, flags)
                    content[m] = emb
                if tcfg.arch == "full_sa":
                    logits = forward_full_sa(params, content)
                elif tcfg.arch.startswith("unimodal:"):
                    logits = unimodal_forward(params, arch_modalities[0], content[arch_modalities[0]])
                else:
                    logits = forward(params, content)
                loss = None
                for h in range(len(cfg.n_classes)):
                    y = labels[sel][:, h]
                    if weights is not None:
                        part = weighted_cross_entropy(logits[h], y, weights[h])
                    else:
                        part = ad.cross_entropy(logits[h], y)
                    loss = part if loss is None else ad.add(loss, part)
                tape.backward(loss)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            lr = opt.step()
            opt.zero_grad()
            epoch_loss += float(loss.data) * len(sel)
        history.append({"epoch": epoch, "loss": epoch_loss / n, "lr": lr})
    return TrainResult(history, total_steps, n, time.time() - started)
