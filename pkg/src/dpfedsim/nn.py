"""Minimal feed-forward network over a flat parameter vector.

A multilayer perceptron with ReLU hidden activations and softmax
cross-entropy loss.  All weights live in a single 1-D float64 vector so
that clipping, noising, aggregation and probing can treat the model as a
point in R^d.  Forward and backward passes are exact and deterministic:
batch reductions happen in fixed index order through numpy, with no
parallel reduction inside a single call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import philox

# Gradient-evaluation counter, test instrumentation only (not synchronized
# across threads).
_grad_evals = 0


def grad_eval_count() -> int:
    return _grad_evals


def reset_grad_eval_count() -> None:
    global _grad_evals
    _grad_evals = 0


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer widths (input, hidden..., output) of an MLP.

    The parameter vector packs, per layer, the weight matrix (row-major,
    shape fan_in x fan_out) followed by the bias vector.
    """

    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError(f"need at least input and output widths, got {self.widths}")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive, got {self.widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def param_count(self) -> int:
        return sum(nin * nout + nout for nin, nout in zip(self.widths, self.widths[1:]))

    def layer_slices(self) -> list[tuple[int, int, int, int, int]]:
        """Per layer: (weights start, bias start, end, fan_in, fan_out)."""
        out = []
        off = 0
        for nin, nout in zip(self.widths, self.widths[1:]):
            out.append((off, off + nin * nout, off + nin * nout + nout, nin, nout))
            off += nin * nout + nout
        return out

    def layer_blocks(self) -> list[tuple[int, int]]:
        """(start, end) of each layer's full block (weights plus bias)."""
        return [(ws, end) for ws, _bs, end, _i, _o in self.layer_slices()]


@dataclass
class Batch:
    """A batch of inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.inputs.shape[0]} input rows"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)


def init_params(arch: MlpArchitecture, seed: int) -> np.ndarray:
    """Deterministic parameter initialization.

    Each layer block (weights and bias) is drawn uniformly from [-a, a]
    with a = sqrt(6 / (fan_in + fan_out)).
    """
    rng = philox(seed)
    w = np.empty(arch.param_count, dtype=np.float64)
    for ws, _bs, end, nin, nout in arch.layer_slices():
        a = np.sqrt(6.0 / (nin + nout))
        w[ws:end] = rng.uniform(-a, a, size=end - ws)
    return w


def _check_dims(w: np.ndarray, arch: MlpArchitecture, batch: Batch) -> None:
    if w.shape != (arch.param_count,):
        raise ValueError(f"parameter vector length {w.shape} != {arch.param_count}")
    if batch.inputs.shape[1] != arch.input_dim:
        raise ValueError(
            f"input dim {batch.inputs.shape[1]} != architecture input {arch.input_dim}"
        )
    if batch.num_classes != arch.output_dim:
        raise ValueError(
            f"batch classes {batch.num_classes} != architecture output {arch.output_dim}"
        )


def _forward(w: np.ndarray, arch: MlpArchitecture, x: np.ndarray):
    """Returns (pre-activations per layer, activations per layer incl. input)."""
    slices = arch.layer_slices()
    acts = [x]
    zs = []
    h = x
    for i, (ws, bs, end, nin, nout) in enumerate(slices):
        z = h @ w[ws:bs].reshape(nin, nout) + w[bs:end]
        zs.append(z)
        h = np.maximum(z, 0.0) if i < len(slices) - 1 else z
        acts.append(h)
    return zs, acts


def forward_logits(w: np.ndarray, arch: MlpArchitecture, inputs: np.ndarray) -> np.ndarray:
    zs, _ = _forward(w, arch, np.asarray(inputs, dtype=np.float64))
    return zs[-1]


def _softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and d(loss)/d(logits)."""
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = m[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def loss_and_grad(
    w: np.ndarray, arch: MlpArchitecture, batch: Batch
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    global _grad_evals
    _check_dims(w, arch, batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    _grad_evals += 1

    slices = arch.layer_slices()
    zs, acts = _forward(w, arch, batch.inputs)
    loss, delta = _softmax_ce(zs[-1], batch.labels)

    grad = np.zeros_like(w)
    for i in range(len(slices) - 1, -1, -1):
        ws, bs, end, nin, nout = slices[i]
        grad[ws:bs] = (acts[i].T @ delta).ravel()
        grad[bs:end] = delta.sum(axis=0)
        if i > 0:
            # ReLU subgradient: derivative at 0 taken as 0.
            delta = (delta @ w[ws:bs].reshape(nin, nout).T) * (zs[i - 1] > 0)
    return loss, grad


def evaluate(w: np.ndarray, arch: MlpArchitecture, data: Batch) -> tuple[float, float]:
    """Mean loss and argmax accuracy on a dataset; deterministic."""
    _check_dims(w, arch, data)
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = forward_logits(w, arch, data.inputs)
    loss, _ = _softmax_ce(logits, data.labels)
    accuracy = float(np.mean(logits.argmax(axis=1) == data.labels))
    return loss, accuracy
