"""Re-derive the all-ones penalty weight from first principles.

Standalone on purpose: no numpy, no pmors import. Windows are written out in
minutes and converted to days by hand, decay uses L ** t = exp(t * ln L),
which is the same curve as exp(-t / S) with S = -1 / ln L, and everything
runs in 50-digit decimal arithmetic.

    python tests/rederive_penalty_weight.py
"""

from decimal import Decimal, getcontext

getcontext().prec = 50

MINUTES_PER_DAY = Decimal(24 * 60)
WINDOW_MINUTES = (Decimal(10), Decimal(3 * 60), Decimal(24 * 60), Decimal(7 * 24 * 60))
RETENTION = Decimal("0.7")


def decay_terms(retention=RETENTION, window_minutes=WINDOW_MINUTES):
    ln_l = retention.ln()
    return [((m / MINUTES_PER_DAY) * ln_l).exp() for m in window_minutes]


def strength(retention=RETENTION) -> Decimal:
    return -1 / retention.ln()


def all_ones_weight(retention=RETENTION) -> Decimal:
    return sum(decay_terms(retention), Decimal(0))


if __name__ == "__main__":
    print(f"S = {strength():.9f}")
    for m, term in zip(WINDOW_MINUTES, decay_terms()):
        print(f"window {int(m):>5d} min: {term:.9f}")
    print(f"w = {all_ones_weight():.9f}")
