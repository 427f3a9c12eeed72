"""Diffusion over the compact prior vector: schedule, forward noising,
denoiser MLP, deterministic reverse chain, and the stage-2 losses.

The reverse update is implemented exactly as the acceptance arithmetic
pins it: Z_{t-1} = (Z_t - eps_hat * (1 - alpha_t)) / sqrt(alpha_t).
A ``ddpm_coeff`` flag swaps in the conventional DDPM coefficient
(1 - alpha_t) / sqrt(1 - alpha_bar_t) for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .nn import ParamStore, apply_linear

TERMINAL_ALPHA_BAR = 1e-4


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray        # [T], beta[t-1] is step t
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # running product of alpha

    @property
    def timesteps(self) -> int:
        return len(self.beta)


def schedule_tables(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Raw linear-ramp tables without the terminal-noise validation."""
    if T < 1:
        raise ConfigError("schedule needs T >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("schedule needs 0 < beta_start <= beta_end < 1")
    beta = np.array([beta_end]) if T == 1 else np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _suggest_beta_end(T: int, beta_start: float) -> Optional[float]:
    lo, hi = beta_start, 1.0 - 1e-9
    if schedule_tables(T, beta_start, hi).alpha_bar[-1] > TERMINAL_ALPHA_BAR:
        return None
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if schedule_tables(T, beta_start, mid).alpha_bar[-1] <= TERMINAL_ALPHA_BAR:
            hi = mid
        else:
            lo = mid
    return hi


def make_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear beta ramp, validated so the terminal state is pure noise.

    Requires alpha_bar[T] <= 1e-4; on violation the error carries a
    beta_end that would satisfy the bound at this T and beta_start.
    """
    sched = schedule_tables(T, beta_start, beta_end)
    ab = sched.alpha_bar
    if np.any(np.diff(ab) >= 0):
        raise ConfigError("alpha_bar must be strictly decreasing")
    if ab[-1] > TERMINAL_ALPHA_BAR:
        hint = _suggest_beta_end(T, beta_start)
        msg = (f"terminal alpha_bar {ab[-1]:.3e} > {TERMINAL_ALPHA_BAR:.0e} "
               f"at T={T}")
        if hint is not None:
            msg += f"; beta_end >= {hint:.6f} would satisfy the bound"
        raise ConfigError(msg)
    return sched


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of an integer timestep, shape [dim]."""
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def init_denoiser(store: ParamStore, cfg: ModelConfig) -> None:
    n_in = 2 * cfg.epr_dim + cfg.time_dim
    store.linear("diff.denoiser.l0", n_in, cfg.denoiser_hidden)
    store.linear("diff.denoiser.l1", cfg.denoiser_hidden, cfg.denoiser_hidden)
    # zero output layer: together with the kappa_t skip in make_denoiser
    # the untrained reverse chain is the identity of its start state, so
    # training begins from a neutral prior instead of amplified noise
    store.constant("diff.denoiser.l2.w",
                   np.zeros((cfg.denoiser_hidden, cfg.epr_dim)))
    store.constant("diff.denoiser.l2.b", np.zeros((1, cfg.epr_dim)))


def make_denoiser(store: ParamStore, cfg: ModelConfig,
                  schedule: Optional[DiffusionSchedule] = None,
                  ddpm_coeff: bool = False) -> Callable:
    """eps_hat = kappa_t Z_t + MLP(concat(Z_t, time embedding, x_s2)).

    The fixed skip kappa_t = (1 - sqrt(alpha_t)) / coeff_t cancels the
    1/sqrt(alpha_t) growth of the reverse update, so the chain built on a
    freshly initialized (zero output layer) denoiser is the exact identity
    map of its start state; training only has to learn the residual
    refinement.  Without a schedule the bare MLP is returned.
    """
    kappa = None
    if schedule is not None:
        alpha = schedule.alpha
        if ddpm_coeff:
            coeff = (1.0 - alpha) / np.sqrt(1.0 - schedule.alpha_bar)
        else:
            coeff = 1.0 - alpha
        kappa = (1.0 - np.sqrt(alpha)) / coeff

    def denoiser(z_t: Tensor, t: int, x_s2: Tensor) -> Tensor:
        if z_t.shape != x_s2.shape:
            raise ShapeError(f"denoiser: {z_t.shape} vs condition {x_s2.shape}")
        B = z_t.shape[0]
        emb = np.tile(time_embedding(t, cfg.time_dim), (B, 1))
        h = ad.concat([z_t, ad.constant(emb), x_s2], axis=1)
        h = ad.gelu(apply_linear(h, store, "diff.denoiser.l0"))
        h = ad.gelu(apply_linear(h, store, "diff.denoiser.l1"))
        out = apply_linear(h, store, "diff.denoiser.l2")
        if kappa is not None:
            out = ad.add(out, ad.scale(z_t, float(kappa[t - 1])))
        return out

    return denoiser


# ---------------------------------------------------------------------------
# forward / reverse processes
# ---------------------------------------------------------------------------


def forward_diffuse(z: Tensor, schedule: DiffusionSchedule,
                    noise: Optional[np.ndarray] = None,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Terminal forward jump: Z_T = sqrt(ab_T) Z + sqrt(1 - ab_T) eps."""
    ab = float(schedule.alpha_bar[-1])
    if noise is None:
        if rng is None:
            raise ConfigError("forward_diffuse needs a fixed noise or an rng")
        noise = rng.standard_normal(z.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z.shape:
        raise ShapeError(f"noise shape {noise.shape} != z shape {z.shape}")
    scaled = ad.scale(z, np.sqrt(ab))
    return ad.add(scaled, ad.constant(np.sqrt(1.0 - ab) * noise))


def reverse_step(z_t: Tensor, t: int, x_s2: Tensor,
                 schedule: DiffusionSchedule, denoiser: Callable,
                 ddpm_coeff: bool = False) -> Tensor:
    """One deterministic reverse update from step t to t-1 (t is 1-based)."""
    T = schedule.timesteps
    if not (1 <= t <= T):
        raise ConfigError(f"reverse_step: t={t} outside [1, {T}]")
    alpha_t = float(schedule.alpha[t - 1])
    if ddpm_coeff:
        coeff = (1.0 - alpha_t) / np.sqrt(1.0 - float(schedule.alpha_bar[t - 1]))
    else:
        coeff = 1.0 - alpha_t
    eps = denoiser(z_t, t, x_s2)
    num = ad.add(z_t, ad.scale(eps, -coeff))
    return ad.scale(num, 1.0 / np.sqrt(alpha_t))


def reverse_chain(z_T: Tensor, x_s2: Tensor, schedule: DiffusionSchedule,
                  denoiser: Callable, ddpm_coeff: bool = False) -> Tensor:
    """Apply reverse_step for t = T..1; fully deterministic."""
    z = z_T
    for t in range(schedule.timesteps, 0, -1):
        z = reverse_step(z, t, x_s2, schedule, denoiser, ddpm_coeff)
    return z


# ---------------------------------------------------------------------------
# stage-2 losses
# ---------------------------------------------------------------------------


def kl_loss(z_s1: Tensor, z_s2: Tensor) -> Tensor:
    """KL between softmax-normalized priors, mean over the batch."""
    return ad.softmax_kl(z_s1, z_s2)


def total_loss(logits: Tensor, labels: np.ndarray, z_s1: Tensor,
               z_s2: Tensor) -> Tensor:
    """L_total = cross-entropy + KL, exact unweighted sum."""
    ce = ad.softmax_cross_entropy(logits, labels)
    return ad.add(ce, kl_loss(z_s1, z_s2))


# ---------------------------------------------------------------------------
# stage-2 training step
# ---------------------------------------------------------------------------


def stage2_train_step(store: ParamStore, cfg: ModelConfig, batch: Dict,
                      schedule: DiffusionSchedule, optimizer,
                      rng: np.random.Generator, *, use_diffusion: bool = True,
                      use_kl: bool = True, insert_noise: bool = True,
                      ddpm_coeff: bool = False) -> Dict[str, float]:
    """One optimization step of the second stage.

    ``batch`` carries Tensors ``x`` (UDC images), ``landmark_feats`` (list
    per level), ``z_prior`` (frozen stage-1 prior, [B, C]), ``x_s2``
    (conditional vector, [B, C]) and the int array ``labels``.  The
    reverse chain runs inside the tape so the denoiser learns end to end.
    """
    from . import transformer as tf

    z_prior: Tensor = batch["z_prior"]
    x_s2: Tensor = batch["x_s2"]
    labels = batch["labels"]

    if use_diffusion:
        if insert_noise:
            z_T = forward_diffuse(z_prior, schedule, rng=rng)
        else:
            # deterministic terminal state: with alpha_bar_T <= 1e-4 the
            # diffused prior is zero to schedule precision, and keeping the
            # residual sqrt(alpha_bar_T)*Z term would thread ground-truth
            # label information through an inference-reachable path
            z_T = ad.constant(np.zeros(z_prior.shape))
        denoiser = make_denoiser(store, cfg, schedule, ddpm_coeff)
        z_hat = reverse_chain(z_T, x_s2, schedule, denoiser, ddpm_coeff)
    else:
        z_hat = x_s2

    logits = tf.classify(store, batch["x"], z_hat, batch["landmark_feats"], cfg,
                         x_s2=x_s2)
    ce = tf.cross_entropy(logits, labels)
    if use_kl and use_diffusion:
        kl = kl_loss(z_prior, z_hat)
        loss = ad.add(ce, kl)
        kl_val = kl.item()
    else:
        loss = ce
        kl_val = 0.0
    grads = ad.backward(loss, parameters=store.trainable())
    optimizer.step(grads)
    acc = float(np.mean(tf.predict(logits.data) == labels))
    return {"loss": loss.item(), "ce": ce.item(), "kl": kl_val, "acc": acc}
