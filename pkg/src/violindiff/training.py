"""Training loops for the two stages.

Both stages optimize a noise-prediction L2 with Adam. The synthesis stage
adds the auxiliary-mel L2 unweighted; the bend stage masks both the forward
noising and the loss to frames with note activation, everything else stays
pinned at its known value. Conditions (performer embedding, E_R, auxiliary
mel) are independently replaced by their learned null embeddings with
probability cond_dropout_p so classifier-free guidance works at sampling
time.

A single numpy Generator seeded from TrainConfig drives batch selection,
crop offsets, diffusion steps, noise, and condition dropout, which makes a
training run reproducible end to end.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import DiffusionConfig, ModelConfig, TrainConfig
from .diffusion import DiffusionSchedule, q_sample
from .neural import StageModel
from .tensor_io import load_checkpoint, save_checkpoint


@dataclass
class TrainItem:
    roll_stack: np.ndarray        # (4, P, T)
    performer: int
    mel: np.ndarray | None = None  # (F, T), normalized to [-1, 1]


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> bool:
        """Apply one update; returns False (and skips) on non-finite grads."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.params[k].data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return True


def draw_condition_dropout(rng: np.random.Generator, p: float, batch: int):
    """Independent Bernoulli(p) masks for (performer, E_R, aux-mel)."""
    return (rng.random(batch) < p, rng.random(batch) < p, rng.random(batch) < p)


def _masked_mse(err2: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    total = mask.sum()
    if total <= 0:
        raise ValueError("loss mask has no active entries")
    return (err2 * mask).sum() * (1.0 / total)


def crop_batch(items: list[TrainItem], picks: np.ndarray, crop: int,
               rng: np.random.Generator, with_mel: bool) -> dict:
    """Assemble aligned random crops; short items are zero-padded and the
    pad is excluded from losses via the valid mask."""
    B = len(picks)
    P = items[0].roll_stack.shape[1]
    rolls = np.zeros((B, 4, P, crop))
    valid = np.zeros((B, crop))
    performer = np.zeros(B, dtype=np.intp)
    mel = None
    if with_mel:
        F = items[0].mel.shape[0]
        mel = np.zeros((B, F, crop))
    for b, i in enumerate(picks):
        item = items[i]
        T = item.roll_stack.shape[2]
        performer[b] = item.performer
        if T >= crop:
            off = int(rng.integers(0, T - crop + 1))
            rolls[b] = item.roll_stack[:, :, off:off + crop]
            valid[b] = 1.0
            if with_mel:
                mel[b] = item.mel[:, off:off + crop]
        else:
            rolls[b, :, :, :T] = item.roll_stack
            valid[b, :T] = 1.0
            if with_mel:
                mel[b, :, :T] = item.mel
    out = {"rolls": rolls, "valid": valid, "performer": performer}
    if with_mel:
        out["mel"] = mel
    return out


def synthesis_loss(model: StageModel, batch: dict, sched: DiffusionSchedule,
                   rng: np.random.Generator, dropout_p: float):
    """Unweighted sum of the noise-prediction and auxiliary-mel L2 terms."""
    mel = batch["mel"]
    B, C, T = mel.shape
    t = rng.integers(0, sched.n_steps, size=B)
    eps = rng.standard_normal(mel.shape)
    x_t = q_sample(mel, t, eps, sched)
    drop_perf, drop_er, drop_aux = draw_condition_dropout(rng, dropout_p, B)
    eps_hat, _, aux = model.forward(x_t, t, batch["rolls"], batch["performer"],
                                    drop_perf, drop_er, drop_aux)
    vmask = batch["valid"][:, None, :]
    loss_eps = _masked_mse((eps_hat - eps) ** 2.0, vmask)
    loss_aux = _masked_mse((aux - mel) ** 2.0, vmask)
    loss = loss_eps + loss_aux
    info = {"loss_eps": loss_eps.item(), "loss_aux": loss_aux.item(),
            "drop": (drop_perf, drop_er, drop_aux)}
    return loss, info


def bend_loss(model: StageModel, batch: dict, sched: DiffusionSchedule,
              rng: np.random.Generator, dropout_p: float):
    """Masked noise-prediction loss; only note-active frames count.

    Noise is added only where the frame roll is active; crops with an
    all-zero mask are dropped from the batch.
    """
    rolls = batch["rolls"]
    bend = rolls[:, 3]
    mask = rolls[:, 0] * batch["valid"][:, None, :]  # frame roll, minus padding
    keep = mask.sum(axis=(1, 2)) > 0
    n_skipped = int((~keep).sum())
    if not keep.any():
        raise ValueError("every crop in the batch has an empty note mask")
    rolls, bend, mask = rolls[keep], bend[keep], mask[keep]
    performer = batch["performer"][keep]
    B = len(bend)
    t = rng.integers(0, sched.n_steps, size=B)
    eps = rng.standard_normal(bend.shape)
    x_t = q_sample(bend, t, eps, sched, mask=mask)
    drop_perf, drop_er, _ = draw_condition_dropout(rng, dropout_p, B)
    eps_hat, _, _ = model.forward(x_t, t, rolls, performer, drop_perf, drop_er)
    loss = _masked_mse((eps_hat - eps) ** 2.0, mask)
    info = {"loss_eps": loss.item(), "loss_aux": 0.0, "skipped": n_skipped,
            "drop": (drop_perf, drop_er)}
    return loss, info


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)

    @property
    def first_loss(self) -> float:
        return self.history[0]["loss"]

    @property
    def last_loss(self) -> float:
        return self.history[-1]["loss"]


def train_stage(model: StageModel, items: list[TrainItem], train_cfg: TrainConfig,
                diff_cfg: DiffusionConfig, ckpt_path=None, meta: dict | None = None,
                log_file=None, n_steps: int | None = None) -> TrainResult:
    """Run the training loop for one stage and return the loss history.

    Writes a checkpoint every ckpt_every steps and at the end when ckpt_path
    is given; emits one JSON line per log_every steps to log_file.
    """
    synthesis = model.stage == "synthesis"
    sched = DiffusionSchedule.linear(
        diff_cfg.synthesis_steps if synthesis else diff_cfg.bend_steps,
        diff_cfg.beta_start, diff_cfg.beta_end)
    crop = train_cfg.crop_synthesis if synthesis else train_cfg.crop_bend
    loss_fn = synthesis_loss if synthesis else bend_loss
    n_steps = train_cfg.train_steps if n_steps is None else n_steps

    opt = Adam(model.params(), lr=train_cfg.lr, beta1=train_cfg.adam_beta1,
               beta2=train_cfg.adam_beta2, eps=train_cfg.adam_eps)
    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult()
    own_log = isinstance(log_file, (str, Path))
    if own_log:
        log_file = open(log_file, "w")
    t_start = time.monotonic()
    for step in range(1, n_steps + 1):
        picks = rng.integers(0, len(items), size=train_cfg.batch_size)
        batch = crop_batch(items, picks, crop, rng, with_mel=synthesis)
        loss, info = loss_fn(model, batch, sched, rng, train_cfg.cond_dropout_p)
        opt.zero_grad()
        loss.backward()
        opt.step()
        entry = {"step": step, "loss": loss.item(), "loss_eps": info["loss_eps"],
                 "loss_aux": info["loss_aux"], "wall_s": round(time.monotonic() - t_start, 3)}
        result.history.append(entry)
        if log_file is not None and (step % train_cfg.log_every == 0 or step == n_steps):
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
        if ckpt_path is not None and step % train_cfg.ckpt_every == 0:
            save_model(ckpt_path, model, {**(meta or {}), "step": step})
    if own_log:
        log_file.close()
    if ckpt_path is not None:
        save_model(ckpt_path, model, {**(meta or {}), "step": n_steps})
    return result


# ---------------------------------------------------------------------------
# checkpoints

def save_model(path, model: StageModel, extra: dict | None = None) -> None:
    meta = {
        "stage": model.stage,
        "model_config": model.cfg.to_dict(),
        "n_performers": model.n_performers,
        "n_mels": model.n_mels,
    }
    if extra:
        meta.update(extra)
    tensors = {k: p.data for k, p in model.params().items()}
    save_checkpoint(path, meta, tensors)


def load_model(path) -> tuple[StageModel, dict]:
    meta, tensors = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = StageModel(cfg, meta["stage"], n_performers=meta["n_performers"],
                       n_mels=meta["n_mels"])
    params = model.params()
    missing = set(params) - set(tensors)
    surplus = set(tensors) - set(params)
    if missing or surplus:
        raise ValueError(f"checkpoint/model parameter mismatch: "
                         f"missing={sorted(missing)[:3]} surplus={sorted(surplus)[:3]}")
    for k, p in params.items():
        if p.data.shape != tensors[k].shape:
            raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {tensors[k].shape}")
        p.data = tensors[k].astype(np.float64)
    return model, meta
