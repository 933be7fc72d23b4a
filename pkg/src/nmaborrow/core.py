"""Studies, arms, treatment networks and the SMD standardization helpers."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Optional

import networkx as nx


class DataError(ValueError):
    """Raised when study data violate a structural invariant."""


@dataclass(frozen=True)
class Arm:
    treatment: str
    n: int
    mean: float
    sd: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise DataError(f"arm {self.treatment!r}: n must be an integer >= 2, got {self.n}")
        if not (self.sd > 0) or not math.isfinite(self.sd):
            raise DataError(f"arm {self.treatment!r}: sd must be positive, got {self.sd}")
        if not math.isfinite(self.mean):
            raise DataError(f"arm {self.treatment!r}: mean must be finite")

    @property
    def se2(self) -> float:
        """Sampling variance of the arm mean, sd^2 / n."""
        return self.sd**2 / self.n


@dataclass(frozen=True)
class Study:
    """One randomized trial. The first arm is the study baseline."""

    id: str
    subgroup: str
    arms: tuple[Arm, ...]
    high_rob: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        if len(self.arms) < 2:
            raise DataError(f"study {self.id!r}: needs at least 2 arms, got {len(self.arms)}")
        seen = [a.treatment for a in self.arms]
        dupes = [t for t, c in Counter(seen).items() if c > 1]
        if dupes:
            raise DataError(f"study {self.id!r}: repeated treatment(s) {dupes}")

    @property
    def n_arms(self) -> int:
        return len(self.arms)

    @property
    def treatments(self) -> tuple[str, ...]:
        return tuple(a.treatment for a in self.arms)

    @property
    def total_n(self) -> int:
        return sum(a.n for a in self.arms)

    def arm(self, treatment: str) -> Arm:
        for a in self.arms:
            if a.treatment == treatment:
                return a
        raise KeyError(f"study {self.id!r} has no arm {treatment!r}")

    def with_baseline(self, treatment: str) -> "Study":
        """Copy of the study with ``treatment`` moved to the first arm."""
        first = self.arm(treatment)
        rest = tuple(a for a in self.arms if a.treatment != treatment)
        return Study(self.id, self.subgroup, (first,) + rest, self.high_rob)


@dataclass(frozen=True)
class Network:
    subgroup: str
    studies: tuple[Study, ...]
    reference: str
    treatments: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "studies", tuple(self.studies))
        derived = sorted({t for s in self.studies for t in s.treatments})
        if self.treatments:
            extra = set(derived) - set(self.treatments)
            if extra:
                raise DataError(f"studies use treatments outside the declared set: {sorted(extra)}")
        object.__setattr__(self, "treatments", tuple(sorted(set(self.treatments) | set(derived))))
        if self.studies and self.reference not in self.treatments:
            raise DataError(f"reference {self.reference!r} not in network {self.subgroup!r}")

    @classmethod
    def from_studies(cls, studies: Iterable[Study], reference: str, subgroup: Optional[str] = None) -> "Network":
        studies = tuple(studies)
        if subgroup is None:
            labels = sorted({s.subgroup for s in studies})
            subgroup = labels[0] if len(labels) == 1 else "+".join(labels)
        return cls(subgroup=subgroup, studies=studies, reference=reference)

    @property
    def basic_treatments(self) -> tuple[str, ...]:
        """Non-reference treatments, i.e. the basic-parameter labels."""
        return tuple(t for t in self.treatments if t != self.reference)

    def ordered_treatments(self) -> tuple[str, ...]:
        return (self.reference,) + self.basic_treatments

    def restrict(self, keep) -> "Network":
        """Network with only the studies for which ``keep(study)`` is true."""
        return Network(self.subgroup, tuple(s for s in self.studies if keep(s)), self.reference)

    def without(self, study_id: str) -> "Network":
        return self.restrict(lambda s: s.id != study_id)

    def __len__(self):
        return len(self.studies)


@dataclass(frozen=True)
class TreatmentSets:
    t_a: tuple[str, ...]
    t_c: tuple[str, ...]
    reference: str

    @property
    def non_common(self) -> tuple[str, ...]:
        return tuple(t for t in self.t_a if t not in self.t_c)


def pooled_sd(study: Study) -> float:
    """Pooled within-study SD over all arms.

    sqrt(sum_k (n_k - 1) sd_k^2 / (sum_k n_k - K)).
    """
    if len(study.arms) < 2:
        raise DataError(f"study {study.id!r}: insufficient sample (fewer than 2 arms)")
    k = len(study.arms)
    dof = sum(a.n for a in study.arms) - k
    if dof <= 0:
        raise DataError(f"study {study.id!r}: insufficient sample")
    ss = math.fsum((a.n - 1) * a.sd**2 for a in study.arms)
    return math.sqrt(ss / dof)


def treatment_sets(dense: Network, sparse: Network) -> TreatmentSets:
    if not dense.studies or not sparse.studies:
        raise DataError("both networks must contain studies")
    if dense.reference != sparse.reference:
        raise DataError(
            f"networks use different references ({dense.reference!r} vs {sparse.reference!r})"
        )
    t1, t2 = set(sparse.treatments), set(dense.treatments)
    t_c = tuple(sorted(t1 & t2))
    if sparse.reference not in t_c:
        raise DataError(f"reference {sparse.reference!r} is not shared by both networks")
    if len(t_c) < 2:
        raise DataError("no borrowable comparisons: the networks only share the reference")
    return TreatmentSets(t_a=tuple(sorted(t1 | t2)), t_c=t_c, reference=sparse.reference)


def direct_comparisons(network: Network) -> dict[tuple[str, str], int]:
    """Number of studies per unordered treatment pair (keys sorted lexicographically)."""
    counts: Counter = Counter()
    for s in network.studies:
        for a, b in combinations(sorted(s.treatments), 2):
            counts[(a, b)] += 1
    return dict(sorted(counts.items()))


def comparison_graph(network: Network) -> nx.MultiGraph:
    g = nx.MultiGraph()
    g.add_nodes_from(network.treatments)
    for s in network.studies:
        for a, b in combinations(s.treatments, 2):
            g.add_edge(a, b, study=s.id)
    return g


def connectivity(network: Network) -> list[tuple[str, ...]]:
    """Connected components of the comparison graph, largest first."""
    g = comparison_graph(network)
    comps = [tuple(sorted(c)) for c in nx.connected_components(g)]
    return sorted(comps, key=lambda c: (-len(c), c))


def require_connected(network: Network) -> None:
    if not network.studies:
        raise DataError(f"network {network.subgroup!r} has no studies")
    comps = connectivity(network)
    if len(comps) != 1:
        listing = "; ".join("{" + ", ".join(c) + "}" for c in comps)
        raise DataError(f"network {network.subgroup!r} is disconnected: {listing}")


def smd(study: Study, treatment: str, baseline: str) -> tuple[float, float]:
    """Observed SMD of ``treatment`` vs ``baseline`` and its large-sample variance.

    The standardizer is the study-wide pooled SD, the same one used by the
    arm-level NMA model.
    """
    a1, a2 = study.arm(baseline), study.arm(treatment)
    d = (a2.mean - a1.mean) / pooled_sd(study)
    n1, n2 = a1.n, a2.n
    var = (n1 + n2) / (n1 * n2) + d**2 / (2 * (n1 + n2))
    return d, var


def merge_networks(dense: Network, sparse: Network, subgroup: str = "naive") -> Network:
    """Pool two subgroups into one network, disambiguating clashing study ids."""
    ids = Counter(s.id for s in dense.studies) + Counter(s.id for s in sparse.studies)
    studies = []
    for source, net in (("dense", dense), ("sparse", sparse)):
        for s in net.studies:
            if ids[s.id] > 1:
                # the subgroup label alone is not unique when both networks share it
                s = Study(f"{source}:{s.subgroup}:{s.id}", s.subgroup, s.arms, s.high_rob)
            studies.append(s)
    return Network(subgroup, tuple(studies), dense.reference)
