"""Shared test fixtures: small networks with known closed-form equilibria."""

import numpy as np
import pytest

from sisinvest import build_graph


@pytest.fixture
def chain():
    """0 -> 1 with lam = (0.1, 0), delta = 0.1, rate 0.1.

    Unperturbed stable equilibrium: p = (1/2, 1/3).
    """
    return build_graph(2, [(0, 1, 0.1)], lam=[0.1, 0.0], delta=0.1)


@pytest.fixture
def cycle():
    """Symmetric 2-cycle at rate 0.5, delta = 0.1, no attacks.

    Endemic: by symmetry each node solves (1 - p) 0.5 p = 0.1 p, giving
    p = (0.8, 0.8).
    """
    return build_graph(2, [(0, 1, 0.5), (1, 0, 0.5)], lam=0.0, delta=0.1)


def layered_instance(rng, n_msccs=3, mscc_size=3, rate=0.3, attack=0.1):
    """Chain of bidirectional-cycle MSCCs linked level to level.

    MSCC k occupies nodes [k*m, (k+1)*m); one forward edge joins each pair
    of consecutive MSCCs.  Attacks sit on the first MSCC only, so every
    MSCC is accessible and exposed.
    """
    m = mscc_size
    n = n_msccs * m
    edges = []
    for k in range(n_msccs):
        base = k * m
        for i in range(m):
            a, b = base + i, base + (i + 1) % m
            r = float(rng.uniform(0.05, rate))
            edges.append((a, b, r))
            edges.append((b, a, float(rng.uniform(0.05, rate))))
    for k in range(n_msccs - 1):
        src = k * m + int(rng.integers(m))
        dst = (k + 1) * m + int(rng.integers(m))
        edges.append((src, dst, float(rng.uniform(0.05, rate))))
    edges = list({(a, b): (a, b, r) for a, b, r in edges}.values())
    lam = np.zeros(n)
    lam[: max(1, m // 2)] = attack
    c = rng.uniform(0.5, 1.5, size=n)
    return build_graph(n, edges, lam=lam, delta=0.1, c=c)
