import time

import pytest

from dpfedsim import cli, federation

_acceptance_lines = []


def record_acceptance(line: str) -> None:
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)

TREND_SEEDS = (11, 22, 33)

# Desk-scale paired-comparison setup: 10-class blobs, 50 clients sampled at
# 20%, two local epochs, C=0.2, sigma=0.95, rho=0.5, 100 rounds.  The free
# knobs (lr, batch, hidden width, separation, IID split) put training in the
# noise-dominated low-curvature regime where the methods' behavior separates.
TREND_OVERRIDES = [
    "clients=50",
    "sample_ratio=0.2",
    "rounds=100",
    "local_epochs=2",
    "batch_size=16",
    "learning_rate=0.01",
    "lr_decay=0.005",
    "momentum=0.5",
    "rho=0.5",
    "clip_bound=0.2",
    "sigma=0.95",
    "classes=10",
    "input_dim=20",
    "examples=20000",
    "separation=2.0",
    "test_fraction=0.2",
    "partition=iid",
    "hidden=64",
]


def trend_config(method: str, seed: int) -> cli.RunConfig:
    return cli.parse_config(None, TREND_OVERRIDES + [f"method={method}", f"seed={seed}"])


class TrendStudy:
    """Paired DP-FedAvg / DP-FedSAM runs shared by the acceptance tests."""

    def __init__(self):
        start = time.monotonic()
        self.runs = {}
        self.data = {}
        for seed in TREND_SEEDS:
            for method in ("dp-fedavg", "dp-fedsam"):
                cfg = trend_config(method, seed)
                if seed not in self.data:
                    self.data[seed] = cli.provision(cfg)
                train, test, part = self.data[seed]
                records, final_w = federation.run_experiment(
                    cfg.federation, train, part, test, return_final_model=True
                )
                self.runs[(method, seed)] = (cfg, records, final_w)
        self.elapsed = time.monotonic() - start

    def records(self, method: str, seed: int):
        return self.runs[(method, seed)][1]

    def final_model(self, method: str, seed: int):
        return self.runs[(method, seed)][2]

    def config(self, method: str, seed: int):
        return self.runs[(method, seed)][0]


@pytest.fixture(scope="session")
def trend_study():
    return TrendStudy()
