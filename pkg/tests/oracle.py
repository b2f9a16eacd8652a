"""Naive loop implementations used as independent references in the tests.

Nothing here imports from snmgest; each function follows the textbook
definition one subject and one month at a time.
"""

import math


def exposure(bmi):
    """(A, Xi, running max) from a BMI list of length H + 1."""
    a, xi, mx = [], [], []
    cur = bmi[0]
    for m in range(len(bmi) - 1):
        cur = max(cur, bmi[m])
        mx.append(cur)
        ok = bmi[m + 1] >= cur
        xi.append(ok)
        a.append(bmi[m + 1] - cur if ok else 0.0)
    return a, xi, mx


def y_m(y, a, beta, m):
    """Constant blip: ``Y - beta * sum_{j >= m} A(j)``."""
    return y - beta * sum(a[m:])


def x_m(x, a, psi, m):
    """Constant time ratio, walking the timeline month by month."""
    if x <= m:
        return x
    total = float(m)
    t = m
    while t + 1 <= x:
        total += math.exp(psi * a[t])
        t += 1
    total += (x - t) * math.exp(psi * a[t]) if x > t else 0.0
    return total


def horizon_integral(a, psi, m):
    return sum(math.exp(psi * v) for v in a[m:])


def ols_1d(x, y):
    """Least squares slope through an intercept-free model ``y = b x``."""
    return sum(u * v for u, v in zip(x, y)) / sum(u * u for u in x)
