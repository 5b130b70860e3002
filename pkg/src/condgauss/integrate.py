"""Seeded Euler-Maruyama simulation.

``simulate`` draws its own noise from a keyed stream; ``simulate_with_noise``
replays a stored :class:`NoisePath`, which lets different models run on the
same realization.  Burn-in discard is the caller's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import GeneralSdeModel
from .rng import stream
from .series import TrajectorySeries

__all__ = ["NoisePath", "simulate", "simulate_with_noise", "simulate_ensemble", "BlowUpError"]


class BlowUpError(RuntimeError):
    """A simulated state left the finite range; carries the failing step."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state encountered at step {step}")
        self.step = step


@dataclass(frozen=True)
class NoisePath:
    """Gaussian increments with per-entry variance dt, regenerable from the seed."""

    dt: float
    increments: np.ndarray  # (J, K)
    seed: int | None = None

    @classmethod
    def generate(cls, seed: int, steps: int, noise_dim: int, dt: float, *ids: int) -> "NoisePath":
        gen = stream(seed, *ids)
        dw = gen.standard_normal((steps, noise_dim)) * np.sqrt(dt)
        return cls(dt=dt, increments=dw, seed=seed)

    @classmethod
    def zeros(cls, steps: int, noise_dim: int, dt: float) -> "NoisePath":
        return cls(dt=dt, increments=np.zeros((steps, noise_dim)))

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.increments.shape[1]


def simulate(model: GeneralSdeModel, u0, dt: float, steps: int, seed: int,
             t0: float = 0.0, labels=None, stream_ids: tuple = ()) -> TrajectorySeries:
    """Integrate u^{j+1} = u^j + drift dt + diffusion dW^j with seeded noise.

    Raises :class:`BlowUpError` naming the step index if the state goes
    non-finite.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    noise = NoisePath.generate(seed, steps, model.noise_dim, dt, *stream_ids)
    out = simulate_with_noise(model, u0, noise, t0=t0, labels=labels)
    return TrajectorySeries(out.dt, out.t0, out.values, seed=seed, labels=out.labels)


def simulate_with_noise(model: GeneralSdeModel, u0, noise: NoisePath,
                        t0: float = 0.0, labels=None) -> TrajectorySeries:
    """Same recursion with supplied increments (shared truth across methods)."""
    if noise.noise_dim != model.noise_dim:
        raise ValueError(
            f"noise dimension {noise.noise_dim} != model noise_dim {model.noise_dim}")
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (model.dim,):
        raise ValueError(f"u0 must have shape ({model.dim},)")
    if not np.all(np.isfinite(u0)):
        raise ValueError("u0 must be finite")

    dt = noise.dt
    values = np.empty((noise.steps + 1, model.dim))
    values[0] = u0
    u = u0
    for j in range(noise.steps):
        t = t0 + j * dt
        u = u + model.drift(u, t) * dt + model.diffusion(u, t) @ noise.increments[j]
        if not np.all(np.isfinite(u)):
            raise BlowUpError(j + 1)
        values[j + 1] = u
    return TrajectorySeries(dt, t0, values, seed=noise.seed, labels=labels)


def simulate_ensemble(model: GeneralSdeModel, u0_batch, dt: float, steps: int,
                      seed: int, t0: float = 0.0, stream_ids: tuple = (),
                      record=None) -> np.ndarray:
    """Integrate a batch of initial states under independent noise.

    ``u0_batch`` has shape (..., dim); drift/diffusion callbacks are
    evaluated on the whole batch at once.  Returns the recorded states
    with shape (len(record)+1?, ) -- precisely: if ``record`` is None the
    full path (steps+1, ..., dim) is returned, otherwise only the listed
    step indices (always including 0 is not implied).
    """
    u = np.array(u0_batch, dtype=float)
    if u.shape[-1] != model.dim:
        raise ValueError("last axis of u0_batch must match model dim")
    gen = stream(seed, *stream_ids)
    sqdt = np.sqrt(dt)
    if record is None:
        out = np.empty((steps + 1,) + u.shape)
        out[0] = u
    else:
        record = sorted(set(int(k) for k in record))
        out = np.empty((len(record),) + u.shape)
        pos = {k: i for i, k in enumerate(record)}
        if 0 in pos:
            out[pos[0]] = u
    for j in range(steps):
        t = t0 + j * dt
        dw = gen.standard_normal(u.shape[:-1] + (model.noise_dim,)) * sqdt
        u = u + model.drift(u, t) * dt + np.einsum("...ik,...k->...i", model.diffusion(u, t), dw)
        if not np.all(np.isfinite(u)):
            raise BlowUpError(j + 1)
        if record is None:
            out[j + 1] = u
        elif (j + 1) in pos:
            out[pos[j + 1]] = u
    return out
