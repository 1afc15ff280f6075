import numpy as np
import pytest

from dpfedsim import data, federation, metrics, nn, optim, privacy
from dpfedsim.rng import BATCH, derive_rng, philox


def small_config(method="dp-fedavg", **overrides):
    """A fast experiment: 8 clients, tiny model, 3 rounds."""
    base = dict(
        method=method, clients=8, sample_ratio=0.5, rounds=3, local_epochs=1,
        batch_size=8, learning_rate=0.05, lr_decay=0.005, momentum=0.5,
        rho=0.3 if "sam" in method else 0.0, sparsity=1.0, sigma=0.4,
        clip_bound=0.2, seed=99, delta=None,
    )
    base.update(overrides)
    delta = base["delta"] if base["delta"] is not None else 1 / (base["clients"] + 1)
    arch = nn.MlpArchitecture((6, 5, 4))
    spec = privacy.PrivacySpec(
        clip_bound=base["clip_bound"], noise_multiplier=base["sigma"],
        sample_ratio=base["sample_ratio"], delta=delta,
        total_clients=base["clients"],
    )
    return federation.FederationConfig(
        arch=arch, method=base["method"], total_clients=base["clients"],
        sample_ratio=base["sample_ratio"], rounds=base["rounds"],
        local_epochs=base["local_epochs"], batch_size=base["batch_size"],
        learning_rate=base["learning_rate"], lr_decay=base["lr_decay"],
        momentum=base["momentum"], rho=base["rho"], sparsity=base["sparsity"],
        privacy=spec, master_seed=base["seed"],
    )


def small_data(seed=100):
    full = data.generate_synthetic(4, 6, 800, 2.5, seed=seed)
    train = full.subset(np.arange(0, 640))
    test = full.subset(np.arange(640, 800))
    part = data.partition_iid(train, 8, seed=seed + 1)
    return train, test, part


class TestSampleClients:
    def test_all_clients_when_m_equals_total(self):
        assert federation.sample_clients(7, 7, seed=3) == list(range(7))

    def test_distinct_and_in_range(self):
        ids = federation.sample_clients(500, 50, seed=9)
        assert len(set(ids)) == 50
        assert all(0 <= i < 500 for i in ids)

    def test_rejects_oversampling(self):
        with pytest.raises(ValueError):
            federation.sample_clients(5, 6, seed=0)

    def test_selection_frequency_uniform(self):
        # 20k seeded draws of 50-of-500; max deviation across 500 clients
        # stays within 4.5 sigma of the binomial expectation
        total, m, draws = 500, 50, 20_000
        counts = np.zeros(total)
        for s in range(draws):
            counts[federation.sample_clients(total, m, seed=s)] += 1
        p = m / total
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.max(np.abs(counts - draws * p)) <= 4.5 * sigma


class TestSparsify:
    def test_identity_at_full_density(self):
        arch = nn.MlpArchitecture((2, 3))
        delta = philox(1).normal(size=arch.param_count)
        masked, mask = federation.sparsify(delta, 1.0, "topk", arch, seed=0)
        assert np.array_equal(masked, delta)
        assert mask.all()

    def test_topk_keeps_largest_magnitudes(self):
        arch = nn.MlpArchitecture((1, 2))  # single layer block of 4 params
        delta = np.array([0.5, -0.2, 0.1, 0.0])
        masked, mask = federation.sparsify(delta, 0.5, "topk", arch, seed=0)
        assert np.array_equal(masked, [0.5, -0.2, 0.0, 0.0])
        assert mask.sum() == 2

    def test_cardinality_per_layer(self):
        arch = nn.MlpArchitecture((5, 7, 3))
        delta = philox(2).normal(size=arch.param_count)
        for p in (0.1, 0.4, 0.9):
            for mode in ("topk", "randk"):
                _, mask = federation.sparsify(delta, p, mode, arch, seed=5)
                expected = sum(
                    int(np.ceil(p * (end - start))) for start, end in arch.layer_blocks()
                )
                assert mask.sum() == expected

    def test_randk_deterministic_by_seed(self):
        arch = nn.MlpArchitecture((5, 7, 3))
        delta = philox(3).normal(size=arch.param_count)
        _, m1 = federation.sparsify(delta, 0.3, "randk", arch, seed=8)
        _, m2 = federation.sparsify(delta, 0.3, "randk", arch, seed=8)
        _, m3 = federation.sparsify(delta, 0.3, "randk", arch, seed=9)
        assert np.array_equal(m1, m2)
        assert not np.array_equal(m1, m3)


class TestLocalRound:
    def test_zero_learning_rate_pure_noise(self):
        cfg = small_config(learning_rate=0.0)
        train, _, part = small_data()
        shard = nn.Batch(train.inputs[part.shards[0]], train.labels[part.shards[0]], 4)
        w = nn.init_params(cfg.arch, 1)
        report = federation.local_round(0, 0, w, shard, cfg)
        assert np.array_equal(report.raw_update, np.zeros_like(w))
        assert report.clip_factor == 1.0
        assert report.pre_clip_norm == 0.0
        # noised update is exactly the noise drawn for this client/round
        from dpfedsim.rng import NOISE, derive_seed

        noise = privacy.add_dp_noise(
            np.zeros_like(w), cfg.privacy, derive_seed(cfg.master_seed, NOISE, 0, 0)
        )
        assert np.array_equal(report.noised_update, noise)

    def test_noiseless_dense_equals_clipped(self):
        cfg = small_config(sigma=0.0)
        train, _, part = small_data()
        shard = nn.Batch(train.inputs[part.shards[1]], train.labels[part.shards[1]], 4)
        w = nn.init_params(cfg.arch, 1)
        report = federation.local_round(1, 0, w, shard, cfg)
        clip = privacy.clip_update(report.raw_update, cfg.privacy.clip_bound)
        assert np.array_equal(report.noised_update, clip.clipped)
        assert report.clip_factor == clip.factor

    def test_step_count_is_epochs_times_batches(self):
        cfg = small_config(local_epochs=2, batch_size=30)
        train, _, part = small_data()
        shard = nn.Batch(train.inputs[part.shards[2]], train.labels[part.shards[2]], 4)
        w = nn.init_params(cfg.arch, 1)
        nn.reset_grad_eval_count()
        federation.local_round(2, 0, w, shard, cfg)
        expected_steps = 2 * int(np.ceil(len(shard) / 30))
        assert nn.grad_eval_count() == expected_steps  # SGD: one eval per step
        nn.reset_grad_eval_count()

    def test_empty_shard_rejected(self):
        cfg = small_config()
        w = nn.init_params(cfg.arch, 1)
        empty = nn.Batch(np.empty((0, 6)), np.empty(0, dtype=int), 4)
        with pytest.raises(ValueError):
            federation.local_round(0, 0, w, empty, cfg)


class TestAggregate:
    def test_single_client(self):
        w = np.ones(5)
        v = np.arange(5.0)
        report = federation.LocalUpdateReport(0, v, 1.0, 1.0, v, 0.0)
        assert np.array_equal(federation.aggregate([report], w), w + v)

    def test_zero_updates_leave_model(self):
        w = philox(5).normal(size=8)
        reports = [
            federation.LocalUpdateReport(i, np.zeros(8), 0.0, 1.0, np.zeros(8), 0.0)
            for i in range(4)
        ]
        assert np.array_equal(federation.aggregate(reports, w), w)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            federation.aggregate([], np.zeros(3))

    def test_removing_one_client_bounded_by_sensitivity(self):
        # Lemma-style check at sigma=0: zeroing one clipped update moves
        # the aggregate by at most C/m, exact float comparison.
        rng = philox(77)
        C, m, d = 0.2, 12, 300
        w = rng.normal(size=d) * 0.2
        reports = []
        for i in range(m):
            v = rng.normal(size=d)
            v *= rng.uniform(0.3, 3.0) * C / np.linalg.norm(v)
            clip = privacy.clip_update(v, C)
            reports.append(
                federation.LocalUpdateReport(i, v, clip.pre_clip_norm, clip.factor, clip.clipped, 0.0)
            )
        agg = federation.aggregate(reports, w)
        for j in range(m):
            zeroed = list(reports)
            zeroed[j] = federation.LocalUpdateReport(
                j, reports[j].raw_update, reports[j].pre_clip_norm,
                reports[j].clip_factor, np.zeros(d), 0.0,
            )
            diff = np.linalg.norm(agg - federation.aggregate(zeroed, w))
            assert diff <= C / m


class TestRunExperiment:
    def test_deterministic_records(self):
        cfg = small_config()
        train, test, part = small_data()
        r1 = federation.run_experiment(cfg, train, part, test)
        r2 = federation.run_experiment(cfg, train, part, test)
        assert federation.records_csv(r1) == federation.records_csv(r2)

    def test_workers_do_not_change_records(self):
        cfg = small_config()
        train, test, part = small_data()
        r1 = federation.run_experiment(cfg, train, part, test, workers=1)
        r4 = federation.run_experiment(cfg, train, part, test, workers=4)
        assert federation.records_csv(r1) == federation.records_csv(r4)

    def test_single_client_degenerates_to_sgd(self):
        # T=1, M=m=1, sigma=0, huge C, rho=0: the round equals K plain
        # SGD steps on that client's shard.
        cfg = small_config(
            clients=1, sample_ratio=1.0, rounds=1, sigma=0.0, clip_bound=1e9,
            momentum=0.5, method="dp-fedsam", rho=0.0,
        )
        full = data.generate_synthetic(4, 6, 64, 2.5, seed=3)
        train = full.subset(np.arange(48))
        test = full.subset(np.arange(48, 64))
        part = data.partition_iid(train, 1, seed=4)
        records, final_w = federation.run_experiment(
            cfg, train, part, test, return_final_model=True
        )

        from dpfedsim.rng import INIT, derive_seed

        w = nn.init_params(cfg.arch, derive_seed(cfg.master_seed, INIT))
        state = optim.OptimizerState.fresh(
            cfg.arch.param_count, cfg.learning_rate, cfg.lr_decay, cfg.momentum,
            cfg.rho, round_index=0,
        )
        shard = nn.Batch(train.inputs[part.shards[0]], train.labels[part.shards[0]], 4)
        batch_rng = derive_rng(cfg.master_seed, BATCH, 0, 0)
        for _ in range(cfg.local_epochs):
            order = batch_rng.permutation(len(shard))
            for lo in range(0, len(shard), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                b = nn.Batch(shard.inputs[idx], shard.labels[idx], 4)
                w, state, _ = optim.sgd_step(w, state, b, cfg.arch)
        assert np.array_equal(final_w, w)
        assert len(records) == 1

    def test_alpha_stats_recomputable_from_reports(self):
        cfg = small_config()
        train, test, part = small_data()
        records, final_w = federation.run_experiment(
            cfg, train, part, test, return_final_model=True
        )
        record = records[0]
        # local rounds are pure functions of (seed, round, client): rebuild
        # the round-0 reports and recompute the stats bit-for-bit
        from dpfedsim.rng import INIT, derive_seed

        w0 = nn.init_params(cfg.arch, derive_seed(cfg.master_seed, INIT))
        reports = []
        for cid in record.client_ids:
            shard = nn.Batch(
                train.inputs[part.shards[cid]], train.labels[part.shards[cid]], 4
            )
            reports.append(federation.local_round(cid, 0, w0, shard, cfg))
        alpha_bar, alpha_tilde, mean_norm = metrics.clip_factor_stats(reports)
        assert alpha_bar == record.alpha_bar
        assert alpha_tilde == record.alpha_tilde
        assert mean_norm == record.mean_pre_clip_norm
        hist = metrics.update_norm_histogram(reports, record.norm_histogram.edges)
        assert np.array_equal(hist.counts, record.norm_histogram.counts)

    def test_histogram_counts_sum_to_m(self):
        cfg = small_config()
        train, test, part = small_data()
        records = federation.run_experiment(cfg, train, part, test)
        for r in records:
            assert r.norm_histogram.counts.sum() == cfg.privacy.sampled_clients

    def test_epsilon_infinite_without_noise(self):
        cfg = small_config(sigma=0.0)
        train, test, part = small_data()
        records = federation.run_experiment(cfg, train, part, test)
        assert all(np.isinf(r.epsilon) for r in records)


class TestMethodReductions:
    def test_sam_rho_zero_equals_fedavg(self):
        train, test, part = small_data()
        cfg_avg = small_config("dp-fedavg")
        cfg_sam = small_config("dp-fedsam", rho=0.0)
        r_avg, w_avg = federation.run_experiment(cfg_avg, train, part, test, return_final_model=True)
        r_sam, w_sam = federation.run_experiment(cfg_sam, train, part, test, return_final_model=True)
        assert federation.records_csv(r_avg) == federation.records_csv(r_sam)
        assert np.array_equal(w_avg, w_sam)

    def test_topk_full_density_equals_fedavg(self):
        train, test, part = small_data()
        cfg_avg = small_config("dp-fedavg")
        cfg_topk = small_config("fed-smp-topk", sparsity=1.0)
        r_avg, w_avg = federation.run_experiment(cfg_avg, train, part, test, return_final_model=True)
        r_topk, w_topk = federation.run_experiment(cfg_topk, train, part, test, return_final_model=True)
        assert federation.records_csv(r_avg) == federation.records_csv(r_topk)
        assert np.array_equal(w_avg, w_topk)

    def test_sparse_methods_run(self):
        train, test, part = small_data()
        for method in ("dp-fedsam-topk", "fed-smp-randk"):
            cfg = small_config(method, sparsity=0.4, rounds=2)
            records = federation.run_experiment(cfg, train, part, test)
            assert len(records) == 2


class TestConfigValidation:
    def test_unknown_method(self):
        with pytest.raises(ValueError):
            small_config("dp-fedavg-blur")

    def test_sparsity_on_dense_method(self):
        with pytest.raises(ValueError):
            small_config("dp-fedavg", sparsity=0.4)

    def test_mismatched_privacy_spec(self):
        cfg = small_config()
        with pytest.raises(ValueError):
            federation.FederationConfig(
                arch=cfg.arch, method=cfg.method, total_clients=9,
                sample_ratio=cfg.sample_ratio, rounds=1, local_epochs=1,
                batch_size=8, learning_rate=0.1, lr_decay=0.0, momentum=0.0,
                rho=0.0, sparsity=1.0, privacy=cfg.privacy, master_seed=0,
            )
