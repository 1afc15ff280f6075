#!/usr/bin/env python3
"""Accumulated privacy budget over communication rounds.

Shows the (epsilon, delta) guarantee of the sampled Gaussian mechanism
under Renyi-DP composition: epsilon grows with rounds T and sampling
ratio q, and shrinks with the noise multiplier sigma.  Reproduces the
kind of budget table the training loop consults every round.

Run:  python demos/privacy_budget.py
"""

from dpfedsim import privacy

Q = 0.1
DELTA = 1 / 500
ROUNDS = [0, 25, 50, 100, 150, 200, 250, 300]


def main():
    print(f"sampling ratio q={Q}, delta={DELTA}\n")
    print(f"{'T':>5}  " + "  ".join(f"sigma={s:<4}" for s in (0.8, 0.95, 1.2)))
    tables = {
        sigma: {row[0]: row[4] for row in privacy.budget_table(Q, sigma, DELTA, ROUNDS)}
        for sigma in (0.8, 0.95, 1.2)
    }
    for rounds in ROUNDS:
        cells = "  ".join(f"{tables[s][rounds]:9.3f}" for s in (0.8, 0.95, 1.2))
        print(f"{rounds:>5}  {cells}")

    rows = privacy.budget_table(Q, 0.95, DELTA, ROUNDS)
    with open("privacy_budget.csv", "w") as fh:
        fh.write(privacy.budget_table_csv(rows))
    print("\nsigma=0.95 table -> privacy_budget.csv")

    # the same numbers, via explicit ledger composition
    ledger = privacy.PrivacyLedger()
    ledger = privacy.ledger_compose(ledger, 300, Q, 0.95)
    eps, order = privacy.ledger_epsilon(ledger, DELTA)
    print(f"ledger check: after 300 rounds epsilon={eps:.4f} at order {order}")


if __name__ == "__main__":
    main()
