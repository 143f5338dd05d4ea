"""The two networks: a roll encoder and a FiLM-conditioned denoiser.

The encoder runs one bidirectional GRU stack per roll type, sums the stack
outputs, and refines them with transformer encoder blocks (no positional
encoding; position information enters through the recurrent state). The
result E_R is a per-frame feature sequence; a linear head on top of it
predicts an auxiliary mel spectrogram.

The denoiser is a non-causal WaveNet: kernel-3 convolutions without
dilation, gated tanh/sigmoid activations, residual and skip paths. The
diffusion step embedding is added to the input (through a linear map to the
channel dimension) and inside every block; E_R enters each block through a
1x1 projection; the performer embedding modulates each block through FiLM.
A second FiLM at the input conditions the synthesis stack on the auxiliary
mel. All FiLM scales are parametrized as 1 + delta with delta zero-initable,
so fresh layers start as the identity.

Widths are configurable; the defaults in ModelConfig are desk-scale
(roughly 8x narrower than a realistic deployment) but the topology does not
change with size.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .roll_codec import N_PITCHES

ROLL_TYPES = ("frame", "onset", "offset", "bend")


def glorot(rng: np.random.Generator, *shape: int) -> Tensor:
    fan_in, fan_out = shape[0], shape[-1]
    if len(shape) == 3:  # conv weight (out, in, k)
        fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """(B, dim) sinusoidal embedding of integer diffusion steps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _linear(x: Tensor, params: dict, prefix: str) -> Tensor:
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


class RollEncoder:
    """Per-roll GRU stacks -> summed -> transformer blocks -> E_R."""

    def __init__(self, cfg: ModelConfig, roll_types: tuple[str, ...],
                 aux_dim: int | None, rng: np.random.Generator):
        if cfg.d_model != 2 * cfg.gru_hidden:
            raise ValueError("d_model must equal 2 * gru_hidden (bidirectional concat)")
        self.cfg = cfg
        self.roll_types = roll_types
        self.aux_dim = aux_dim
        D, H = cfg.d_model, cfg.gru_hidden
        p: dict[str, Tensor] = {}
        for rt in roll_types:
            in_dim = N_PITCHES
            for layer in range(cfg.gru_layers):
                for direction in ("fwd", "rev"):
                    base = f"gru.{rt}.{layer}.{direction}"
                    p[f"{base}.wx"] = glorot(rng, in_dim, 3 * H)
                    p[f"{base}.wh"] = glorot(rng, H, 3 * H)
                    p[f"{base}.bx"] = zeros(3 * H)
                    p[f"{base}.bh"] = zeros(3 * H)
                in_dim = 2 * H
        for i in range(cfg.tf_layers):
            base = f"tf.{i}"
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{base}.{name}.w"] = glorot(rng, D, D)
                p[f"{base}.{name}.b"] = zeros(D)
            p[f"{base}.ln1.g"] = Tensor(np.ones(D), requires_grad=True)
            p[f"{base}.ln1.b"] = zeros(D)
            p[f"{base}.ffn1.w"] = glorot(rng, D, cfg.tf_ffn)
            p[f"{base}.ffn1.b"] = zeros(cfg.tf_ffn)
            p[f"{base}.ffn2.w"] = glorot(rng, cfg.tf_ffn, D)
            p[f"{base}.ffn2.b"] = zeros(D)
            p[f"{base}.ln2.g"] = Tensor(np.ones(D), requires_grad=True)
            p[f"{base}.ln2.b"] = zeros(D)
        if aux_dim is not None:
            p["aux.w"] = glorot(rng, D, aux_dim)
            p["aux.b"] = zeros(aux_dim)
        self.params = p

    def _gru_stack(self, x: Tensor, rt: str) -> Tensor:
        for layer in range(self.cfg.gru_layers):
            halves = []
            for direction, reverse in (("fwd", False), ("rev", True)):
                base = f"gru.{rt}.{layer}.{direction}"
                halves.append(ad.gru_layer(
                    x, self.params[f"{base}.wx"], self.params[f"{base}.wh"],
                    self.params[f"{base}.bx"], self.params[f"{base}.bh"],
                    reverse=reverse))
            x = ad.concat(halves, axis=-1)
        return x

    def _attention(self, x: Tensor, base: str) -> Tensor:
        B, T, D = x.shape
        h = self.cfg.tf_heads
        dh = D // h

        def split_heads(t: Tensor) -> Tensor:
            return t.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

        q = split_heads(_linear(x, self.params, f"{base}.wq"))
        k = split_heads(_linear(x, self.params, f"{base}.wk"))
        v = split_heads(_linear(x, self.params, f"{base}.wv"))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return _linear(out, self.params, f"{base}.wo")

    def forward(self, roll_stack: np.ndarray):
        """roll_stack: (B, len(roll_types), P, T) -> (E_R (B,T,D), aux (B,F,T) or None)."""
        if roll_stack.ndim != 4 or roll_stack.shape[1] != len(self.roll_types) \
                or roll_stack.shape[2] != N_PITCHES:
            raise ValueError(
                f"expected (B, {len(self.roll_types)}, {N_PITCHES}, T) rolls, "
                f"got {roll_stack.shape}")
        summed = None
        for i, rt in enumerate(self.roll_types):
            x = Tensor(np.ascontiguousarray(np.swapaxes(roll_stack[:, i], 1, 2)))
            out = self._gru_stack(x, rt)
            summed = out if summed is None else summed + out
        x = summed
        for i in range(self.cfg.tf_layers):
            base = f"tf.{i}"
            x = ad.layer_norm(x + self._attention(x, base),
                              self.params[f"{base}.ln1.g"], self.params[f"{base}.ln1.b"])
            ffn = _linear(ad.relu(_linear(x, self.params, f"{base}.ffn1")),
                          self.params, f"{base}.ffn2")
            x = ad.layer_norm(x + ffn,
                              self.params[f"{base}.ln2.g"], self.params[f"{base}.ln2.b"])
        aux = None
        if self.aux_dim is not None:
            aux = _linear(x, self.params, "aux").transpose(0, 2, 1)  # (B, F, T)
        return x, aux


class Denoiser:
    """Non-causal WaveNet predicting the added noise."""

    def __init__(self, cfg: ModelConfig, channels: int, use_aux_film: bool,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.channels = channels
        self.use_aux_film = use_aux_film
        D, R, C = cfg.d_model, cfg.res_channels, channels
        p: dict[str, Tensor] = {}
        p["temb1.w"] = glorot(rng, D, D)
        p["temb1.b"] = zeros(D)
        p["temb2.w"] = glorot(rng, D, D)
        p["temb2.b"] = zeros(D)
        p["f_t.w"] = glorot(rng, D, C)
        p["f_t.b"] = zeros(C)
        if use_aux_film:
            # FiLM from the auxiliary mel: identity at init
            p["film_aux.g.w"] = zeros(C, C, 1)
            p["film_aux.g.b"] = zeros(C)
            p["film_aux.b.w"] = zeros(C, C, 1)
            p["film_aux.b.b"] = zeros(C)
        p["in.w"] = glorot(rng, R, C, 1)
        p["in.b"] = zeros(R)
        for i in range(cfg.res_layers):
            base = f"block.{i}"
            p[f"{base}.tproj.w"] = glorot(rng, D, R)
            p[f"{base}.tproj.b"] = zeros(R)
            p[f"{base}.conv.w"] = glorot(rng, 2 * R, R, cfg.kernel_size)
            p[f"{base}.conv.b"] = zeros(2 * R)
            p[f"{base}.erproj.w"] = glorot(rng, 2 * R, D, 1)
            p[f"{base}.erproj.b"] = zeros(2 * R)
            p[f"{base}.film_p.g.w"] = zeros(D, 2 * R)
            p[f"{base}.film_p.g.b"] = zeros(2 * R)
            p[f"{base}.film_p.b.w"] = zeros(D, 2 * R)
            p[f"{base}.film_p.b.b"] = zeros(2 * R)
            p[f"{base}.res.w"] = glorot(rng, R, R, 1)
            p[f"{base}.res.b"] = zeros(R)
            p[f"{base}.skip.w"] = glorot(rng, R, R, 1)
            p[f"{base}.skip.b"] = zeros(R)
        p["head1.w"] = glorot(rng, R, R, 1)
        p["head1.b"] = zeros(R)
        p["head2.w"] = glorot(rng, C, R, 1)
        p["head2.b"] = zeros(C)
        self.params = p

    def forward(self, x_t, t, e_r: Tensor, e_p: Tensor, aux: Tensor | None):
        """x_t: (B,C,T); t: (B,) ints; e_r: (B,T,D); e_p: (B,D); aux: (B,C,T)."""
        p = self.params
        x_t = ad._ensure(x_t)
        B, C, T = x_t.shape
        if C != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {C}")
        temb = Tensor(sinusoidal_embedding(t, self.cfg.d_model))
        temb = _linear(ad.relu(_linear(temb, p, "temb1")), p, "temb2")  # (B, D)

        x = x_t + _linear(temb, p, "f_t").reshape(B, C, 1)
        if self.use_aux_film:
            if aux is None:
                raise ValueError("this denoiser requires the auxiliary mel condition")
            gamma = 1.0 + ad.conv1d(aux, p["film_aux.g.w"], p["film_aux.g.b"])
            beta = ad.conv1d(aux, p["film_aux.b.w"], p["film_aux.b.b"])
            x = gamma * x + beta
        x = ad.relu(ad.conv1d(x, p["in.w"], p["in.b"]))  # (B, R, T)

        er_t = e_r.transpose(0, 2, 1)  # (B, D, T)
        R = self.cfg.res_channels
        skip_sum = None
        for i in range(self.cfg.res_layers):
            base = f"block.{i}"
            h = x + _linear(temb, p, f"{base}.tproj").reshape(B, R, 1)
            u = ad.conv1d(h, p[f"{base}.conv.w"], p[f"{base}.conv.b"])
            u = u + ad.conv1d(er_t, p[f"{base}.erproj.w"], p[f"{base}.erproj.b"])
            gamma = 1.0 + _linear(e_p, p, f"{base}.film_p.g").reshape(B, 2 * R, 1)
            beta = _linear(e_p, p, f"{base}.film_p.b").reshape(B, 2 * R, 1)
            u = gamma * u + beta
            act = ad.tanh(u[:, :R]) * ad.sigmoid(u[:, R:])
            x = x + ad.conv1d(act, p[f"{base}.res.w"], p[f"{base}.res.b"])
            s = ad.conv1d(act, p[f"{base}.skip.w"], p[f"{base}.skip.b"])
            skip_sum = s if skip_sum is None else skip_sum + s
        h = ad.relu(ad.conv1d(ad.relu(skip_sum * (1.0 / math.sqrt(self.cfg.res_layers))),
                              p["head1.w"], p["head1.b"]))
        return ad.conv1d(h, p["head2.w"], p["head2.b"])


class StageModel:
    """Encoder, denoiser, performer table and null conditions for one stage.

    stage "synthesis": denoises mel channels, conditioned on all four rolls
    (three with no_bend) plus the auxiliary mel through FiLM.
    stage "bend": denoises the bend roll (P channels), conditioned on the
    frame/onset/offset rolls only; no auxiliary head.
    """

    STAGES = ("synthesis", "bend")

    def __init__(self, cfg: ModelConfig, stage: str, n_performers: int,
                 n_mels: int = 128, seed: int = 0):
        if stage not in self.STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.stage = stage
        self.n_performers = n_performers
        self.n_mels = n_mels
        if stage == "synthesis":
            roll_types = ROLL_TYPES[:3] if cfg.no_bend else ROLL_TYPES
            self.channels = n_mels
            self.encoder = RollEncoder(cfg, roll_types, aux_dim=n_mels, rng=rng)
            self.denoiser = Denoiser(cfg, n_mels, use_aux_film=True, rng=rng)
        else:
            self.channels = N_PITCHES
            self.encoder = RollEncoder(cfg, ROLL_TYPES[:3], aux_dim=None, rng=rng)
            self.denoiser = Denoiser(cfg, N_PITCHES, use_aux_film=False, rng=rng)
        D = cfg.d_model
        self.extra = {
            "performers": Tensor(rng.standard_normal((n_performers, D)) * 0.1,
                                 requires_grad=True),
            "null_perf": Tensor(rng.standard_normal(D) * 0.1, requires_grad=True),
            "null_er": Tensor(rng.standard_normal(D) * 0.1, requires_grad=True),
        }
        if stage == "synthesis":
            self.extra["null_aux"] = Tensor(rng.standard_normal(n_mels) * 0.1,
                                            requires_grad=True)

    @property
    def roll_types(self) -> tuple[str, ...]:
        return self.encoder.roll_types

    def params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"denoiser.{k}": v for k, v in self.denoiser.params.items()})
        out.update(self.extra)
        return out

    def select_rolls(self, roll_stack: np.ndarray) -> np.ndarray:
        """Slice a full (B, 4, P, T) stack down to this stage's conditioning."""
        return roll_stack[:, :len(self.roll_types)]

    def performer_embedding(self, performer_idx) -> Tensor:
        return ad.take_rows(self.extra["performers"], performer_idx)

    def null_er(self, B: int, T: int) -> Tensor:
        ones = np.ones((B, T, 1))
        return self.extra["null_er"].reshape(1, 1, self.cfg.d_model) * ones

    def null_perf(self, B: int) -> Tensor:
        return self.extra["null_perf"].reshape(1, self.cfg.d_model) * np.ones((B, 1))

    def null_aux(self, B: int, T: int) -> Tensor:
        return self.extra["null_aux"].reshape(1, self.n_mels, 1) * np.ones((B, 1, T))

    def forward(self, x_t, t, roll_stack: np.ndarray, performer_idx,
                drop_perf=None, drop_er=None, drop_aux=None):
        """Full conditional pass; returns (eps_hat, e_r, aux).

        drop_* are optional (B,) boolean masks replacing that condition with
        its learned null embedding per batch item (training-time CFG
        dropout). The auxiliary head output is returned before any dropout
        so its loss always sees the real prediction.
        """
        x_t = ad._ensure(x_t)
        B, _, T = x_t.shape
        e_r, aux = self.encoder.forward(self.select_rolls(roll_stack))
        e_p = self.performer_embedding(performer_idx)
        cond_er, cond_aux = e_r, aux
        if drop_perf is not None and drop_perf.any():
            e_p = ad.where_const(drop_perf[:, None], self.null_perf(B), e_p)
        if drop_er is not None and drop_er.any():
            cond_er = ad.where_const(drop_er[:, None, None], self.null_er(B, T), cond_er)
        if self.stage == "synthesis" and drop_aux is not None and drop_aux.any():
            cond_aux = ad.where_const(drop_aux[:, None, None], self.null_aux(B, T), cond_aux)
        eps = self.denoiser.forward(x_t, t, cond_er, e_p, cond_aux)
        return eps, e_r, aux

    def forward_null(self, x_t, t):
        """Fully unconditional pass (all conditions nulled) for guidance."""
        x_t = ad._ensure(x_t)
        B, _, T = x_t.shape
        aux = self.null_aux(B, T) if self.stage == "synthesis" else None
        return self.denoiser.forward(x_t, t, self.null_er(B, T), self.null_perf(B), aux)
