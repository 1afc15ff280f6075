"""Local optimizers: heavy-ball SGD and sharpness-aware minimization.

The SAM step takes the batch gradient g at w, climbs to the perturbed
point w + rho * g/||g||, re-evaluates the gradient there on the same
batch, and applies the momentum update with that perturbed gradient.
Exactly two gradient evaluations per SAM step, one per SGD step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import nn

# Below this gradient norm the perturbation direction is undefined and the
# perturbation is taken as zero.
NORM_FLOOR = 1e-12


def lr_at_round(base_lr: float, decay: float, round_index: int) -> float:
    """Inverse-time decay, applied per communication round."""
    return base_lr / (1.0 + decay * round_index)


@dataclass
class OptimizerState:
    """Per-client optimizer state, reset at the start of every round."""

    velocity: np.ndarray
    step_count: int
    base_lr: float
    decay: float
    momentum: float
    rho: float
    round_index: int

    @classmethod
    def fresh(
        cls,
        dim: int,
        base_lr: float,
        decay: float,
        momentum: float,
        rho: float,
        round_index: int,
    ) -> "OptimizerState":
        return cls(
            velocity=np.zeros(dim, dtype=np.float64),
            step_count=0,
            base_lr=float(base_lr),
            decay=float(decay),
            momentum=float(momentum),
            rho=float(rho),
            round_index=int(round_index),
        )

    @property
    def learning_rate(self) -> float:
        """Effective rate for this round; constant within the round."""
        return lr_at_round(self.base_lr, self.decay, self.round_index)


def sam_perturbation(g: np.ndarray, rho: float) -> np.ndarray:
    """Ascent perturbation rho * g / ||g||, zero when ||g|| is degenerate."""
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    norm = float(np.linalg.norm(g))
    if norm <= NORM_FLOOR:
        return np.zeros_like(g)
    return (rho / norm) * g


def _apply(w: np.ndarray, state: OptimizerState, grad: np.ndarray):
    velocity = state.momentum * state.velocity + grad
    w_new = w - state.learning_rate * velocity
    state_new = dataclasses.replace(
        state, velocity=velocity, step_count=state.step_count + 1
    )
    return w_new, state_new


def sgd_step(
    w: np.ndarray, state: OptimizerState, batch: nn.Batch, arch: nn.MlpArchitecture
) -> tuple[np.ndarray, OptimizerState, float]:
    """One heavy-ball step.  Returns (w', state', batch loss at w)."""
    loss, grad = nn.loss_and_grad(w, arch, batch)
    w_new, state_new = _apply(w, state, grad)
    return w_new, state_new, loss


def sam_step(
    w: np.ndarray, state: OptimizerState, batch: nn.Batch, arch: nn.MlpArchitecture
) -> tuple[np.ndarray, OptimizerState, float]:
    """One SAM step: gradient taken at the perturbed point, same batch.

    Returns (w', state', batch loss at the unperturbed w).
    """
    loss, grad = nn.loss_and_grad(w, arch, batch)
    delta = sam_perturbation(grad, state.rho)
    _, grad_tilde = nn.loss_and_grad(w + delta, arch, batch)
    w_new, state_new = _apply(w, state, grad_tilde)
    return w_new, state_new, loss
