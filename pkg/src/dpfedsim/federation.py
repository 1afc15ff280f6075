"""Round orchestration: sampling, local training, clip+noise, aggregation.

Implements the federated training loop for DP-FedAvg, DP-FedSAM and the
sparsified variants.  Each client's randomness (batch order, DP noise,
sparsity mask) comes from its own counter-based stream keyed by
(master seed, round, client id, purpose), so round records are identical
whether clients run on one worker or many.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics, nn, optim, privacy, rng
from .data import Dataset, Partition

METHODS = ("dp-fedavg", "dp-fedsam", "dp-fedsam-topk", "fed-smp-topk", "fed-smp-randk")
_SAM_METHODS = {"dp-fedsam", "dp-fedsam-topk"}
_SPARSE_MODE = {"dp-fedsam-topk": "topk", "fed-smp-topk": "topk", "fed-smp-randk": "randk"}


@dataclass(frozen=True)
class FederationConfig:
    """All run hyperparameters of one experiment."""

    arch: nn.MlpArchitecture
    method: str
    total_clients: int
    sample_ratio: float
    rounds: int
    local_epochs: int
    batch_size: int
    learning_rate: float
    lr_decay: float
    momentum: float
    rho: float
    sparsity: float
    privacy: privacy.PrivacySpec
    master_seed: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ValueError(f"local epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.lr_decay < 0 or self.momentum < 0 or self.momentum >= 1:
            raise ValueError("need lr_decay >= 0 and momentum in [0, 1)")
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if not 0 < self.sparsity <= 1:
            raise ValueError(f"sparsity must be in (0, 1], got {self.sparsity}")
        if self.sparsify_mode is None and self.sparsity != 1.0:
            raise ValueError(
                f"method {self.method!r} is not sparsified; sparsity must be 1"
            )
        if self.total_clients != self.privacy.total_clients:
            raise ValueError("client count disagrees with the privacy spec")
        if self.sample_ratio != self.privacy.sample_ratio:
            raise ValueError("sampling ratio disagrees with the privacy spec")

    @property
    def uses_sam(self) -> bool:
        return self.method in _SAM_METHODS

    @property
    def sparsify_mode(self) -> str | None:
        return _SPARSE_MODE.get(self.method)

    @property
    def sampled_clients(self) -> int:
        return self.privacy.sampled_clients


@dataclass
class LocalUpdateReport:
    """One client's record for one round.

    `raw_update` is the local update before masking; `pre_clip_norm` is
    the norm of what entered clipping (after the sparsity mask, if any).
    `mask_seed` identifies the sparsity mask stream (None when dense).
    """

    client_id: int
    raw_update: np.ndarray
    pre_clip_norm: float
    clip_factor: float
    noised_update: np.ndarray
    train_loss: float
    mask_seed: int | None = None


@dataclass
class RoundRecord:
    """One round's aggregate bookkeeping."""

    round_index: int
    client_ids: tuple[int, ...]
    alpha_bar: float
    alpha_tilde: float
    mean_pre_clip_norm: float
    norm_histogram: metrics.NormHistogram
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    epsilon: float


def sample_clients(total: int, sampled: int, seed: int) -> list[int]:
    """Sample distinct client ids uniformly without replacement."""
    if not 1 <= sampled <= total:
        raise ValueError(f"cannot sample {sampled} of {total} clients")
    generator = rng.philox(seed)
    ids = generator.choice(total, size=sampled, replace=False)
    return sorted(int(i) for i in ids)


def sparsify(
    delta: np.ndarray,
    p: float,
    mode: str,
    arch: nn.MlpArchitecture,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Keep ceil(p * layer size) coordinates per layer, zero the rest.

    topk keeps the largest-magnitude coordinates, randk a uniform random
    subset.  Returns (masked delta, boolean mask).
    """
    if not 0 < p <= 1:
        raise ValueError(f"sparsity must be in (0, 1], got {p}")
    if mode not in ("topk", "randk"):
        raise ValueError(f"unknown sparsify mode {mode!r}")
    if p == 1.0:
        return delta.copy(), np.ones(delta.shape, dtype=bool)
    mask = np.zeros(delta.shape, dtype=bool)
    generator = rng.philox(seed) if mode == "randk" else None
    for start, end in arch.layer_blocks():
        size = end - start
        keep = int(math.ceil(p * size))
        if mode == "topk":
            block = np.abs(delta[start:end])
            order = np.argsort(-block, kind="stable")
            mask[start + order[:keep]] = True
        else:
            chosen = generator.choice(size, size=keep, replace=False)
            mask[start + chosen] = True
    return np.where(mask, delta, 0.0), mask


def local_round(
    client_id: int,
    round_index: int,
    global_w: np.ndarray,
    shard: nn.Batch,
    config: FederationConfig,
) -> LocalUpdateReport:
    """K local steps from the global model, then mask, clip and noise.

    K = local_epochs * ceil(shard size / batch size); the batch order is
    a seeded shuffle per epoch.  Optimizer state (momentum) starts fresh.
    """
    if len(shard) == 0:
        raise ValueError(f"client {client_id} has an empty shard")
    state = optim.OptimizerState.fresh(
        dim=config.arch.param_count,
        base_lr=config.learning_rate,
        decay=config.lr_decay,
        momentum=config.momentum,
        rho=config.rho,
        round_index=round_index,
    )
    step = optim.sam_step if config.uses_sam else optim.sgd_step
    batch_rng = rng.derive_rng(config.master_seed, rng.BATCH, round_index, client_id)

    w = global_w.copy()
    losses = []
    for _ in range(config.local_epochs):
        order = batch_rng.permutation(len(shard))
        for lo in range(0, len(shard), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = nn.Batch(shard.inputs[idx], shard.labels[idx], shard.num_classes)
            w, state, loss = step(w, state, batch, config.arch)
            losses.append(loss)
    raw_update = w - global_w

    mask_seed = None
    to_clip = raw_update
    mask = None
    if config.sparsify_mode is not None:
        mask_seed = rng.derive_seed(config.master_seed, rng.MASK, round_index, client_id)
        to_clip, mask = sparsify(
            raw_update, config.sparsity, config.sparsify_mode, config.arch, mask_seed
        )

    clip = privacy.clip_update(to_clip, config.privacy.clip_bound)
    noise_seed = rng.derive_seed(config.master_seed, rng.NOISE, round_index, client_id)
    noised = privacy.add_dp_noise(clip.clipped, config.privacy, noise_seed)
    if mask is not None:
        # Retained coordinates only; masked-out positions carry no noise.
        noised = np.where(mask, noised, 0.0)

    return LocalUpdateReport(
        client_id=client_id,
        raw_update=raw_update,
        pre_clip_norm=clip.pre_clip_norm,
        clip_factor=clip.factor,
        noised_update=noised,
        train_loss=float(np.mean(losses)),
        mask_seed=mask_seed,
    )


def aggregate(reports: list[LocalUpdateReport], global_w: np.ndarray) -> np.ndarray:
    """Global model plus the mean of noised updates, summed in id order."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    total = np.zeros_like(global_w)
    for report in sorted(reports, key=lambda r: r.client_id):
        if report.noised_update.shape != global_w.shape:
            raise ValueError("update dimension mismatch")
        total += report.noised_update
    return global_w + total / len(reports)


def run_experiment(
    config: FederationConfig,
    train: Dataset,
    partition: Partition,
    test: Dataset,
    workers: int = 1,
    return_final_model: bool = False,
):
    """Run T rounds of the configured method; deterministic in the seed.

    Per round: sample m clients, run their local rounds (in parallel when
    workers > 1), aggregate in client-id order, evaluate, and compose the
    privacy ledger.  BLAS is pinned to one thread so records are bit-equal
    for any worker count.  Returns the list of RoundRecords, or
    (records, final weights) when return_final_model is set.
    """
    if partition.num_clients != config.total_clients:
        raise ValueError(
            f"partition has {partition.num_clients} shards for "
            f"{config.total_clients} clients"
        )
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")

    spec = config.privacy
    shards = [
        nn.Batch(train.inputs[s], train.labels[s], train.num_classes)
        for s in partition.shards
    ]
    train_batch = nn.Batch(train.inputs, train.labels, train.num_classes)
    test_batch = nn.Batch(test.inputs, test.labels, test.num_classes)
    edges = metrics.default_norm_edges(spec.clip_bound)

    if spec.noise_multiplier > 0:
        per_round_rdp = tuple(
            privacy.rdp_sampled_gaussian(spec.sample_ratio, spec.noise_multiplier, a)
            for a in privacy.DEFAULT_ORDERS
        )
    else:
        per_round_rdp = tuple(math.inf for _ in privacy.DEFAULT_ORDERS)

    records: list[RoundRecord] = []
    with threadpool_limits(limits=1, user_api="blas"):
        w = nn.init_params(config.arch, rng.derive_seed(config.master_seed, rng.INIT))
        pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            for t in range(config.rounds):
                sample_seed = rng.derive_seed(config.master_seed, rng.SAMPLE, t)
                ids = sample_clients(config.total_clients, spec.sampled_clients, sample_seed)
                run_one = lambda cid: local_round(cid, t, w, shards[cid], config)
                if pool is not None:
                    reports = list(pool.map(run_one, ids))
                else:
                    reports = [run_one(cid) for cid in ids]
                w = aggregate(reports, w)

                alpha_bar, alpha_tilde, mean_norm = metrics.clip_factor_stats(reports)
                hist = metrics.update_norm_histogram(reports, edges, round_index=t)
                train_loss, train_acc = nn.evaluate(w, config.arch, train_batch)
                test_loss, test_acc = nn.evaluate(w, config.arch, test_batch)
                ledger = privacy.PrivacyLedger(
                    totals=tuple((t + 1) * e for e in per_round_rdp),
                    rounds_composed=t + 1,
                )
                epsilon, _ = privacy.ledger_epsilon(ledger, spec.delta)
                records.append(
                    RoundRecord(
                        round_index=t,
                        client_ids=tuple(ids),
                        alpha_bar=alpha_bar,
                        alpha_tilde=alpha_tilde,
                        mean_pre_clip_norm=mean_norm,
                        norm_histogram=hist,
                        train_loss=train_loss,
                        train_accuracy=train_acc,
                        test_loss=test_loss,
                        test_accuracy=test_acc,
                        epsilon=epsilon,
                    )
                )
        finally:
            if pool is not None:
                pool.shutdown()
    if return_final_model:
        return records, w
    return records


RECORD_HEADER = "t,eps,alpha_bar,alpha_tilde,mean_norm,train_loss,test_loss,test_acc"


def records_csv(records: list[RoundRecord]) -> str:
    """The run record stream: one comma-separated row per round."""
    lines = [RECORD_HEADER]
    for r in records:
        lines.append(
            f"{r.round_index},{r.epsilon!r},{r.alpha_bar!r},{r.alpha_tilde!r},"
            f"{r.mean_pre_clip_norm!r},{r.train_loss!r},{r.test_loss!r},"
            f"{r.test_accuracy!r}"
        )
    return "\n".join(lines) + "\n"
