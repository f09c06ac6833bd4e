"""The momentum FGSM attack family.

One function per update rule, all sharing a single iteration engine with
L-infinity projection and pixel clipping:

  fgsm      one-step sign attack
  ifgsm     iterative sign attack
  mifgsm    + temporal momentum (decay mu, L1-normalized gradients)
  nifgsm    + Nesterov lookahead on top of temporal momentum
  vmifgsm   + variance tuning from the previous iteration's neighborhood
  smifgsm   spatial momentum: gradients aggregated over randomly
            pad-and-resized views of the current iterate
  sm2ifgsm  spatial + temporal momentum combined
  compose_dts  decorator stacking DI / scale-copy / TI onto any base rule

Attacks are pure per-image computations: randomness comes from per-image
streams derived from (cfg.seed, image index), so results do not depend on
how a batch is partitioned across workers. Images enter as [C,H,W] or
[B,C,H,W] float64 in [0,1]; every returned iterate satisfies
max|x_adv - x| <= epsilon and x_adv in [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .models import ModelParams, loss_and_input_grad, predict, ensemble_logits
from .tensor import Tensor
from .transforms import (
    PadResizeSpec,
    TiKernel,
    diverse_input,
    random_pad_resize,
    scale_copies,
    ti_smooth,
)

BALL_TOL = 1e-9


@dataclass(frozen=True)
class AttackConfig:
    """Shared hyperparameters; unused fields are ignored by simpler rules.

    alpha defaults to epsilon / iterations. lambda_weights defaults to the
    uniform 1/spatial_n. pad_spec defaults to the rescaled pad-and-resize
    range for the model's input side.
    """

    epsilon: float = 0.2
    iterations: int = 10
    alpha: float | None = None
    mu: float = 1.0
    spatial_n: int = 12
    lambda_weights: tuple | None = None
    vmi_samples: int = 20
    vmi_beta: float = 1.5
    di_prob: float = 0.5
    ti_kernel: TiKernel | None = None
    si_copies: int = 5
    pad_spec: PadResizeSpec | None = None
    seed: int = 0
    audit: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.spatial_n < 1:
            raise ConfigError("spatial_n must be >= 1")
        if self.vmi_samples < 0 or self.vmi_beta < 0:
            raise ConfigError("vmi_samples and vmi_beta must be >= 0")
        if not 0.0 <= self.di_prob <= 1.0:
            raise ConfigError("di_prob must lie in [0,1]")
        if self.si_copies < 1:
            raise ConfigError("si_copies must be >= 1")
        if self.lambda_weights is not None:
            lam = np.asarray(self.lambda_weights, dtype=np.float64)
            if lam.shape != (self.spatial_n,):
                raise ConfigError("lambda_weights must have spatial_n entries")
            if (lam < 0).any():
                raise ConfigError("lambda_weights must be nonnegative")
            if abs(lam.sum() - 1.0) > 1e-12:
                raise ConfigError("lambda_weights must sum to 1")

    @property
    def step(self) -> float:
        return self.epsilon / self.iterations if self.alpha is None else self.alpha

    def lam(self) -> np.ndarray:
        if self.lambda_weights is None:
            return np.full(self.spatial_n, 1.0 / self.spatial_n)
        return np.asarray(self.lambda_weights, dtype=np.float64)


@dataclass
class AttackRunResult:
    """x_adv plus the bookkeeping the stability analyses need.

    per_iteration_gradients holds the pre-sign update direction of each
    iteration (raw gradient for plain iterative rules, the accumulated
    momentum for momentum rules) when requested.
    """

    x_adv: np.ndarray
    success_whitebox: np.ndarray
    iterations_run: int
    per_iteration_gradients: list | None = None
    zero_gradient_events: int = 0


def clip_to_ball(x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the L-inf ball around x_orig intersected with [0,1]."""
    return np.clip(np.clip(x_adv, x_orig - epsilon, x_orig + epsilon), 0.0, 1.0)


def image_streams(seed: int, indices) -> list:
    """Independent per-image RNG streams; batch partition cannot change them."""
    return [
        np.random.default_rng(np.random.SeedSequence((seed, int(i))))
        for i in indices
    ]


def _l1_normalized(g: np.ndarray) -> np.ndarray:
    """Per-image L1 normalization over all coordinates; zero stays zero."""
    l1 = np.abs(g).sum(axis=tuple(range(1, g.ndim)), keepdims=True)
    return np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)


def _spec_of(model):
    return model.spec if isinstance(model, ModelParams) else model[0].spec


def _whitebox_predictions(model, x):
    if isinstance(model, ModelParams):
        return predict(model, x)[1]
    logits = ensemble_logits(list(model), Tensor(x)).data
    return logits.argmax(axis=1)


def _prepare(model, x, y):
    spec = _spec_of(model)
    arr = np.asarray(x, dtype=np.float64)
    single = arr.shape == tuple(spec.input_shape)
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != tuple(spec.input_shape):
        raise ConfigError(
            f"attack input {arr.shape} does not match model input "
            f"{tuple(spec.input_shape)}"
        )
    yarr = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if yarr.shape != (arr.shape[0],):
        raise ConfigError("one label per attacked image required")
    return arr, yarr, single


def _plain_primitive(model):
    def gp(x, y, rngs, t):
        return loss_and_input_grad(model, x, y)[1]

    return gp


def _default_pad_spec(cfg: AttackConfig, side: int) -> PadResizeSpec:
    return cfg.pad_spec if cfg.pad_spec is not None else PadResizeSpec.default_for(side)


def _spatial_sum(model, x, y, lam, pad_spec, rngs, gp, t):
    """lambda-weighted sum of gradients over the transform pool.

    Pool member 1 is always the identity (this is what makes the n=1 case
    collapse to the plain gradient, and with it sm2ifgsm to mifgsm);
    members 2..n are independent random pad-and-resize draws per image.
    """
    g = lam[0] * gp(x, y, rngs, t)
    for i in range(1, len(lam)):
        xt = np.stack([random_pad_resize(img, pad_spec, rng) for img, rng in zip(x, rngs)])
        g += lam[i] * gp(xt, y, rngs, t)
    return g


def spatial_gradient(model, x, y, n, lam=None, pad_spec=None, rng=None):
    """Spatial-momentum gradient: sum_i lambda_i * dJ/dx at H_i(x).

    H_1 is the identity; H_2..H_n are random pad-and-resize draws from
    `rng` (a Generator for a single image, or one per image for a batch).
    Gradients are taken at the transformed images and accumulated
    directly, since every H_i preserves shape.
    """
    if n < 1:
        raise ConfigError("spatial_gradient needs n >= 1")
    arr, yarr, single = _prepare(model, x, y)
    if lam is None:
        lam = np.full(n, 1.0 / n)
    else:
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape != (n,):
            raise ConfigError("lambda weights must have n entries")
    if pad_spec is None:
        pad_spec = PadResizeSpec.default_for(arr.shape[-1])
    if rng is None:
        rngs = image_streams(0, range(len(arr)))
    elif isinstance(rng, np.random.Generator):
        rngs = [rng] * len(arr)
    else:
        rngs = list(rng)
    g = _spatial_sum(model, arr, yarr, lam, pad_spec, rngs, _plain_primitive(model), 0)
    return g[0] if single else g


def _run(model, x, y, cfg, rule, iterations, alpha, retain, image_indices):
    """Shared iteration engine: step, project, clip, audit, record."""
    x4, y1, single = _prepare(model, x, y)
    if image_indices is None:
        image_indices = range(len(x4))
    rngs = image_streams(cfg.seed, image_indices)
    x0 = x4.copy()
    xa = x4.copy()
    per_iter = [] if retain else None
    zero_events = 0
    state = {}
    for t in range(iterations):
        g = rule(xa, y1, rngs, t, state)
        zero_events += int(
            np.sum(~np.any(g, axis=tuple(range(1, g.ndim))))
        )
        xa = clip_to_ball(xa + alpha * np.sign(g), x0, cfg.epsilon)
        if cfg.audit:
            assert np.abs(xa - x0).max() <= cfg.epsilon + BALL_TOL
            assert xa.min() >= 0.0 and xa.max() <= 1.0
        if retain:
            per_iter.append(g[0].copy() if single else g.copy())
    wrong = _whitebox_predictions(model, xa) != y1
    return AttackRunResult(
        x_adv=xa[0] if single else xa,
        success_whitebox=bool(wrong[0]) if single else wrong,
        iterations_run=iterations,
        per_iteration_gradients=per_iter,
        zero_gradient_events=zero_events,
    )


def _momentum_step(state, g_new, mu):
    acc = state.get("g")
    norm = _l1_normalized(g_new)
    acc = norm if acc is None else mu * acc + norm
    state["g"] = acc
    return acc


def fgsm(model, x, y, cfg, image_indices=None, retain_gradients=False, _grad_primitive=None):
    """One-step attack: x + epsilon * sign(grad). Ignores iterations/alpha."""
    gp = _grad_primitive or _plain_primitive(model)

    def rule(xa, y1, rngs, t, state):
        return gp(xa, y1, rngs, t)

    return _run(model, x, y, cfg, rule, 1, cfg.epsilon, retain_gradients, image_indices)


def ifgsm(model, x, y, cfg, image_indices=None, retain_gradients=False, _grad_primitive=None):
    """Iterative sign attack with small step alpha."""
    gp = _grad_primitive or _plain_primitive(model)

    def rule(xa, y1, rngs, t, state):
        return gp(xa, y1, rngs, t)

    return _run(model, x, y, cfg, rule, cfg.iterations, cfg.step, retain_gradients, image_indices)


def mifgsm(model, x, y, cfg, image_indices=None, retain_gradients=False, _grad_primitive=None):
    """Temporal momentum: g <- mu*g + grad/||grad||_1, step on sign(g)."""
    gp = _grad_primitive or _plain_primitive(model)

    def rule(xa, y1, rngs, t, state):
        return _momentum_step(state, gp(xa, y1, rngs, t), cfg.mu)

    return _run(model, x, y, cfg, rule, cfg.iterations, cfg.step, retain_gradients, image_indices)


def nifgsm(model, x, y, cfg, image_indices=None, retain_gradients=False, _grad_primitive=None):
    """Nesterov variant: gradient taken at the lookahead x + alpha*mu*g.

    The lookahead point is not clipped; only committed iterates are.
    """
    gp = _grad_primitive or _plain_primitive(model)
    alpha = cfg.step

    def rule(xa, y1, rngs, t, state):
        acc = state.get("g")
        look = xa if acc is None else xa + alpha * cfg.mu * acc
        return _momentum_step(state, gp(look, y1, rngs, t), cfg.mu)

    return _run(model, x, y, cfg, rule, cfg.iterations, alpha, retain_gradients, image_indices)


def vmifgsm(model, x, y, cfg, image_indices=None, retain_gradients=False, _grad_primitive=None):
    """Variance tuning: momentum over (grad + v) with v estimated from
    vmi_samples random points within a per-coordinate radius vmi_beta*epsilon
    around the current iterate."""
    gp = _grad_primitive or _plain_primitive(model)
    radius = cfg.vmi_beta * cfg.epsilon

    def rule(xa, y1, rngs, t, state):
        g_raw = gp(xa, y1, rngs, t)
        v = state.get("v")
        tuned = g_raw if v is None else g_raw + v
        acc = state.get("g")
        norm = _l1_normalized(tuned)
        acc = norm if acc is None else cfg.mu * acc + norm
        state["g"] = acc
        if cfg.vmi_samples > 0:
            total = np.zeros_like(g_raw)
            for _ in range(cfg.vmi_samples):
                noise = np.stack(
                    [rng.uniform(-radius, radius, size=xa.shape[1:]) for rng in rngs]
                )
                total += gp(xa + noise, y1, rngs, t)
            state["v"] = total / cfg.vmi_samples - g_raw
        return acc

    return _run(model, x, y, cfg, rule, cfg.iterations, cfg.step, retain_gradients, image_indices)


def smifgsm(model, x, y, cfg, image_indices=None, retain_gradients=False, _grad_primitive=None):
    """Spatial momentum only: step on the sign of the aggregated gradient."""
    gp = _grad_primitive or _plain_primitive(model)
    lam = cfg.lam()

    def rule(xa, y1, rngs, t, state):
        pad_spec = _default_pad_spec(cfg, xa.shape[-1])
        return _spatial_sum(model, xa, y1, lam, pad_spec, rngs, gp, t)

    return _run(model, x, y, cfg, rule, cfg.iterations, cfg.step, retain_gradients, image_indices)


def sm2ifgsm(model, x, y, cfg, image_indices=None, retain_gradients=False, _grad_primitive=None):
    """Spatial + temporal momentum: the spatial aggregate feeds the
    temporal accumulator in place of the raw gradient."""
    gp = _grad_primitive or _plain_primitive(model)
    lam = cfg.lam()

    def rule(xa, y1, rngs, t, state):
        pad_spec = _default_pad_spec(cfg, xa.shape[-1])
        gs = _spatial_sum(model, xa, y1, lam, pad_spec, rngs, gp, t)
        return _momentum_step(state, gs, cfg.mu)

    return _run(model, x, y, cfg, rule, cfg.iterations, cfg.step, retain_gradients, image_indices)


def compose_dts(base_attack, cfg: AttackConfig | None = None):
    """Decorate a base attack with DI + scale copies + TI smoothing.

    Every gradient evaluation of the base rule becomes: transform the
    input with probability di_prob, average gradients over si_copies
    scale copies, then smooth the result with the TI kernel before it
    enters the base rule's normalization/momentum. With di_prob=0,
    si_copies=1 and no (or a delta) kernel the decorated attack is
    bit-identical to the base.
    """
    captured = cfg

    def attack(model, x, y, cfg=None, image_indices=None, retain_gradients=False,
               _grad_primitive=None):
        eff = cfg if cfg is not None else captured
        if eff is None:
            raise ConfigError("compose_dts needs an AttackConfig")
        inner = _grad_primitive or _plain_primitive(model)

        def gp(xb, y1, rngs, t):
            if eff.di_prob > 0:
                xb = np.stack(
                    [diverse_input(img, eff.di_prob, rng) for img, rng in zip(xb, rngs)]
                )
            total = None
            for copy in scale_copies(xb, eff.si_copies):
                g = inner(copy, y1, rngs, t)
                total = g if total is None else total + g
            g = total / eff.si_copies
            if eff.ti_kernel is not None:
                g = ti_smooth(g, eff.ti_kernel)
            return g

        return base_attack(model, x, y, eff, image_indices=image_indices,
                           retain_gradients=retain_gradients, _grad_primitive=gp)

    attack.__name__ = base_attack.__name__ + "_dts"
    return attack


ATTACKS = {
    "fgsm": fgsm,
    "ifgsm": ifgsm,
    "mifgsm": mifgsm,
    "nifgsm": nifgsm,
    "vmifgsm": vmifgsm,
    "smifgsm": smifgsm,
    "sm2ifgsm": sm2ifgsm,
}


def get_attack(name: str):
    """Resolve an attack name; '<base>-dts' wraps the base with compose_dts."""
    if name in ATTACKS:
        return ATTACKS[name]
    if name.endswith("-dts") and name[:-4] in ATTACKS:
        return compose_dts(ATTACKS[name[:-4]])
    raise ConfigError(
        f"unknown attack {name!r}; have {sorted(ATTACKS)} and '<name>-dts'"
    )
