"""DDPM schedules, forward noising, and ancestral sampling.

Both stages share this machinery: a linear beta schedule, classifier-free
guidance at sampling time, masked diffusion for the bend stage (noise is
added, and denoising happens, only where the frame roll is active; the rest
stays pinned), and overlapped-window sampling for sequences longer than the
training crop. Long-form sampling averages the predicted noise inside
overlaps at every reverse step, so the windows are denoised jointly rather
than stitched afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class SamplingError(RuntimeError):
    """Non-finite values appeared during reverse diffusion."""

    def __init__(self, step: int):
        super().__init__(f"non-finite values at reverse step {step}")
        self.step = step


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, n_steps: int, beta_start: float = 1e-4,
               beta_end: float = 0.06) -> "DiffusionSchedule":
        if n_steps < 2:
            raise ValueError("need at least 2 diffusion steps")
        if not 0.0 < beta_start < beta_end < 1.0:
            raise ValueError("beta range must satisfy 0 < start < end < 1")
        beta = np.linspace(beta_start, beta_end, n_steps)
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))

    @property
    def n_steps(self) -> int:
        return len(self.beta)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule,
             mask: np.ndarray | None = None) -> np.ndarray:
    """Forward process: x_t = sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps.

    t may be a scalar or a (B,) array for batched x0. Where mask is 0 the
    input passes through unchanged.
    """
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.n_steps):
        raise ValueError(f"diffusion step out of range [0, {sched.n_steps})")
    ab = sched.alpha_bar[t]
    extra = (1,) * (x0.ndim - ab.ndim)
    ab = ab.reshape(ab.shape + extra)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    if mask is not None:
        x_t = np.where(mask > 0.5, x_t, x0)
    return x_t


def guided_eps(eps_cond, eps_null, x_t: np.ndarray, t: int, weight: float) -> np.ndarray:
    """Classifier-free guidance: eps = eps_null + w (eps_cond - eps_null).

    The degenerate weights short-circuit to a single forward call so w=1 is
    exactly the conditional model and w=0 exactly the unconditional one.
    """
    if weight == 1.0:
        return eps_cond(x_t, t)
    if weight == 0.0:
        return eps_null(x_t, t)
    e_n = eps_null(x_t, t)
    e_c = eps_cond(x_t, t)
    return e_n + weight * (e_c - e_n)


def p_sample(eps_fn, shape: tuple[int, int], sched: DiffusionSchedule, seed: int = 0,
             mask: np.ndarray | None = None, init: np.ndarray | None = None) -> np.ndarray:
    """Ancestral DDPM sampling of a (C, T) array.

    eps_fn(x_t, t) returns the (already guided) noise estimate. Runs
    t = N-1 .. 0 with the DDPM posterior (variance beta_tilde, no noise at
    t=0) and clamps the x0 estimate to [-1, 1] each step. Where mask is 0
    the output stays pinned to init (zeros if init is None) at every step.
    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    fixed = np.zeros(shape) if init is None else np.asarray(init, dtype=np.float64)
    x = rng.standard_normal(shape)
    if mask is not None:
        x = np.where(mask > 0.5, x, fixed)
    ab = sched.alpha_bar
    for t in range(sched.n_steps - 1, -1, -1):
        eps = eps_fn(x, t)
        x0_hat = (x - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
        z = rng.standard_normal(shape)
        if t > 0:
            ab_prev = ab[t - 1]
            coef0 = np.sqrt(ab_prev) * sched.beta[t] / (1.0 - ab[t])
            coefx = np.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab[t])
            var = (1.0 - ab_prev) / (1.0 - ab[t]) * sched.beta[t]
            x = coef0 * x0_hat + coefx * x + np.sqrt(var) * z
        else:
            x = x0_hat
        if mask is not None:
            x = np.where(mask > 0.5, x, fixed)
        if not np.all(np.isfinite(x)):
            raise SamplingError(t)
    return x


def tile_windows(total: int, window: int, overlap: int) -> list[int]:
    """Window start offsets covering [0, total) with the given overlap.

    Every frame lands in at least one window and never in more than two;
    that is what makes the overlap-averaged eps a simple two-way mean. The
    tail window is merged into the previous start when appending it would
    triple-cover the junction.
    """
    if window <= 0 or not 0 <= overlap <= window // 2:
        raise ValueError("need 0 <= overlap <= window // 2")
    if total <= window:
        return [0]
    stride = window - overlap
    starts = list(range(0, total - window + 1, stride))
    tail = total - window
    if starts[-1] < tail:
        if len(starts) > 1 and tail - starts[-1] < overlap:
            starts[-1] = tail
        else:
            starts.append(tail)
    return starts


def long_sample(make_window_fn, shape: tuple[int, int], window: int,
                sched: DiffusionSchedule, overlap: int | None = None, seed: int = 0,
                mask: np.ndarray | None = None, init: np.ndarray | None = None) -> np.ndarray:
    """Sample a (C, T_total) array longer than one conditioning window.

    make_window_fn(start, end) -> eps_fn for that frame slice (its own
    conditioning crop). At every reverse step the noise estimate is computed
    per window and averaged where windows overlap, then the whole sequence
    takes one joint posterior update. A sequence no longer than the window
    degenerates to plain p_sample, bit-identical for the same seed.
    """
    C, total = shape
    if overlap is None:
        overlap = window // 4
    window = min(window, total)
    starts = tile_windows(total, window, overlap)
    fns = [(s, make_window_fn(s, s + window)) for s in starts]

    if len(fns) == 1:
        return p_sample(fns[0][1], shape, sched, seed=seed, mask=mask, init=init)

    counts = np.zeros(total)
    for s in starts:
        counts[s:s + window] += 1.0

    def eps_fn(x, t):
        buf = np.zeros(shape)
        for s, fn in fns:
            buf[:, s:s + window] += fn(x[:, s:s + window], t)
        return buf / counts

    return p_sample(eps_fn, shape, sched, seed=seed, mask=mask, init=init)


class ConditionedSampler:
    """Binds a stage model to fixed conditioning for windowed sampling.

    Each window's E_R (and auxiliary mel) comes from encoding that window's
    slice of the rolls, matching the crop lengths seen in training; the
    encodings are computed once and reused across all reverse steps.
    """

    def __init__(self, model, roll_stack: np.ndarray, performer_idx: int,
                 guidance_weight: float):
        if roll_stack.ndim != 3:
            raise ValueError("expected an unbatched (4, P, T) roll stack")
        self.model = model
        self.rolls = roll_stack[None]  # (1, 4, P, T)
        self.performer_idx = int(performer_idx)
        self.weight = float(guidance_weight)
        self._cache: dict[tuple[int, int], tuple] = {}

    def _conditioning(self, start: int, end: int):
        key = (start, end)
        if key not in self._cache:
            with ad.no_grad():
                piece = self.model.select_rolls(self.rolls)[:, :, :, start:end]
                e_r, aux = self.model.encoder.forward(piece)
                e_p = self.model.performer_embedding([self.performer_idx])
            self._cache[key] = (e_r, aux, e_p)
        return self._cache[key]

    def window_fn(self, start: int, end: int):
        e_r, aux, e_p = self._conditioning(start, end)

        def eps_cond(x, t):
            with ad.no_grad():
                out = self.model.denoiser.forward(x[None], [t], e_r, e_p, aux)
            return out.data[0]

        def eps_null(x, t):
            with ad.no_grad():
                out = self.model.forward_null(x[None], [t])
            return out.data[0]

        return lambda x, t: guided_eps(eps_cond, eps_null, x, t, self.weight)
