"""Synthetic arm-level networks drawn from the random-effects NMA model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import Arm, Network, Study


def simulate_study(
    study_id: str,
    design: Sequence[str],
    effects: Mapping[str, float],
    tau: float,
    rng: np.random.Generator,
    subgroup: str = "P1",
    n_range: tuple[int, int] = (40, 120),
    sd: float = 10.0,
    baseline: float = -10.0,
    high_rob: Optional[bool] = None,
    shift: Optional[Mapping[tuple[str, str], float]] = None,
) -> Study:
    """Draw one study; ``effects`` maps treatment -> SMD vs the reference.

    ``shift`` adds a constant to the true contrast of selected (baseline, arm)
    pairs, which is how inconsistent designs are generated.
    """
    k = len(design)
    means = np.array([effects[design[j]] - effects[design[0]] for j in range(1, k)])
    if shift:
        means = means + np.array([shift.get((design[0], design[j]), 0.0) for j in range(1, k)])
    cov = tau**2 * (np.eye(k - 1) + np.ones((k - 1, k - 1))) / 2.0
    delta = rng.multivariate_normal(means, cov) if k > 1 else np.zeros(0)
    sds = sd * rng.uniform(0.8, 1.2, size=k)
    ns = rng.integers(n_range[0], n_range[1] + 1, size=k)
    sdp = np.sqrt(np.sum((ns - 1) * sds**2) / (ns.sum() - k))
    theta0 = baseline + rng.normal(0.0, 3.0)
    theta = np.concatenate([[theta0], theta0 + delta * sdp])
    y = rng.normal(theta, sds / np.sqrt(ns))
    arms = tuple(Arm(t, int(n), float(m), float(s)) for t, n, m, s in zip(design, ns, y, sds))
    return Study(study_id, subgroup, arms, high_rob)


def simulate_network(
    designs: Sequence[Sequence[str]],
    effects: Mapping[str, float],
    tau: float,
    rng: np.random.Generator,
    reference: str,
    subgroup: str = "P1",
    prefix: str = "s",
    rob_fraction: float = 0.0,
    shift: Optional[Mapping[tuple[str, str], float]] = None,
    **kwargs,
) -> Network:
    studies = []
    for i, design in enumerate(designs):
        rob = bool(rng.random() < rob_fraction) if rob_fraction else False
        studies.append(
            simulate_study(f"{prefix}{i + 1:03d}", design, effects, tau, rng, subgroup,
                           high_rob=rob, shift=shift, **kwargs)
        )
    return Network(subgroup, tuple(studies), reference)


@dataclass
class BorrowingBenchmark:
    sparse: Network
    dense: Network
    sparse_effects: dict[str, float]
    dense_effects: dict[str, float]
    shift: float
    tau: float


def borrowing_benchmark(seed: int, shift: float = 0.2, tau: float = 0.1) -> BorrowingBenchmark:
    """Sparse network (10 studies, 8 treatments, one study per comparison) and a
    dense network (120 studies, 12 treatments) whose effects differ by ``shift``
    on every comparison with the reference."""
    rng = np.random.default_rng(seed)
    ref = "Pbo"
    actives = [f"T{i:02d}" for i in range(1, 12)]
    dense_effects = {ref: 0.0}
    dense_effects.update({t: -0.15 - 0.05 * i for i, t in enumerate(actives)})
    common = actives[:7]
    sparse_effects = {ref: 0.0}
    sparse_effects.update({t: dense_effects[t] - shift for t in common})

    sparse_designs = [(ref, t) for t in common] + [(common[0], common[1]), (common[2], common[3]), (common[4], common[5])]
    dense_designs = []
    pool = [ref] + actives
    for t in actives:
        dense_designs += [(ref, t)] * 4
    while len(dense_designs) < 110:
        a, b = rng.choice(len(pool), size=2, replace=False)
        dense_designs.append((pool[min(a, b)], pool[max(a, b)]))
    for _ in range(10):
        a, b, c = sorted(rng.choice(len(pool), size=3, replace=False))
        dense_designs.append((pool[a], pool[b], pool[c]))
    sparse = simulate_network(sparse_designs, sparse_effects, tau, rng, ref, subgroup="P1", prefix="sp")
    dense = simulate_network(dense_designs, dense_effects, tau, rng, ref, subgroup="P2", prefix="dn",
                             rob_fraction=0.15)
    return BorrowingBenchmark(sparse, dense, sparse_effects, dense_effects, shift, tau)


def loop_network(seed: int, inconsistency: float = 0.0, tau: float = 0.1, n_range=(60, 150)) -> Network:
    """Four-treatment network with a closed A-B-Pbo loop for node-splitting.

    ``inconsistency`` is added to the true A-vs-Pbo effect in the direct
    Pbo-A studies only.
    """
    rng = np.random.default_rng(seed)
    effects = {"Pbo": 0.0, "A": -0.4, "B": -0.25, "C": -0.1}
    designs = [("Pbo", "A")] * 3 + [("Pbo", "B")] * 3 + [("A", "B")] * 3 + [("Pbo", "C")] * 2 + [("B", "C")] * 2
    shift = {("Pbo", "A"): inconsistency} if inconsistency else None
    return simulate_network(designs, effects, tau, rng, "Pbo", prefix="lp", shift=shift, n_range=n_range)
