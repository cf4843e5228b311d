"""Synthetic LBSNs with known structure, for tests and demos.

The planted-pattern network has friend groups whose members all head to the
same venue on a given day; the venue changes daily, so only friends' same-day
check-ins reveal it. A member's own history and static preferences narrow it
down to the group's few venues but cannot pick the day's one.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

EPOCH = datetime(2010, 6, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class PlantedSpec:
    groups: int = 4
    group_size: int = 5
    categories: int = 5
    start_pois: int = 30
    days: int = 30
    seed: int = 0

    @property
    def n_users(self) -> int:
        return self.groups * self.group_size

    @property
    def n_pois(self) -> int:
        return self.groups * self.categories + self.start_pois


def _fmt(t: datetime) -> str:
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def planted_lbsn(spec: PlantedSpec = PlantedSpec()) -> tuple[list[str], list[str]]:
    """Check-in and edge lines in the Gowalla text format.

    Every day each member makes one two-check-in trajectory: a random start
    venue, then the group's venue of the day for a randomly drawn category.
    Members go in a random order two hours apart, so all but the first see
    friends' same-day visits in their history.
    """
    rng = np.random.default_rng(spec.seed)
    n_target = spec.groups * spec.categories
    # all venues inside one 0.5 degree grid cell
    coords = {
        f"p{i:02d}": (30.05 + 0.4 * rng.random(), -97.95 + 0.4 * rng.random())
        for i in range(spec.n_pois)
    }
    checkins = []
    for day in range(spec.days):
        base = EPOCH + timedelta(days=day, hours=8)
        for g in range(spec.groups):
            cat = int(rng.integers(spec.categories))
            target = f"p{g * spec.categories + cat:02d}"
            for slot, m in enumerate(rng.permutation(spec.group_size)):
                user = f"u{g * spec.group_size + int(m):02d}"
                start = f"p{n_target + int(rng.integers(spec.start_pois)):02d}"
                t0 = base + timedelta(hours=2 * slot, minutes=int(rng.integers(0, 20)))
                for poi, t in ((start, t0), (target, t0 + timedelta(minutes=30))):
                    lat, lon = coords[poi]
                    checkins.append((t, f"{user}\t{_fmt(t)}\t{lat:.6f}\t{lon:.6f}\t{poi}"))
    checkins.sort(key=lambda x: x[0])
    edges = []
    for g in range(spec.groups):
        members = [f"u{g * spec.group_size + i:02d}" for i in range(spec.group_size)]
        edges += [f"{a}\t{b}" for i, a in enumerate(members) for b in members[i + 1 :]]
    return [line for _, line in checkins], edges


def is_planted(instance, window_hours: float = 12.0) -> bool:
    """True when a friend visited the target venue within ``window_hours`` before."""
    recent = (instance.prediction_time - instance.ltsc_times) <= window_hours * 3600
    friend = instance.ltsc_users != instance.user
    return bool(np.any(recent & friend & (instance.ltsc_pois == instance.positive)))


def barbell_adjacency(clique: int = 6) -> dict[int, list[tuple[int, float]]]:
    """Two ``clique``-cliques joined by a single bridge edge, unit weights."""
    adj: dict[int, list[tuple[int, float]]] = {i: [] for i in range(2 * clique)}
    for base in (0, clique):
        for i in range(base, base + clique):
            adj[i] = [(j, 1.0) for j in range(base, base + clique) if j != i]
    adj[clique - 1].append((clique, 1.0))
    adj[clique].append((clique - 1, 1.0))
    return adj
