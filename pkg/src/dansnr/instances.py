"""Ranking instances (current trajectory, social history, positive, negatives) and negative sampling."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .geo import assign_city
from .ingest import Dataset, Trajectory

log = logging.getLogger(__name__)


@dataclass
class TrainingInstance:
    """One next-POI prediction: predict ``positive`` at ``prediction_time``.

    ``stc_*`` hold the current trajectory prefix (at most M check-ins).
    ``ltsc_*`` hold the merged history of the user and direct friends strictly
    before the prediction time, sorted by (time, user, poi) and cut to the
    latest L. ``own_*`` is the same for the user alone, used by the
    friend-free variants.
    """

    iid: int
    user: int
    stc_pois: np.ndarray
    stc_times: np.ndarray
    stc_positions: np.ndarray
    ltsc_users: np.ndarray
    ltsc_pois: np.ndarray
    ltsc_times: np.ndarray
    own_pois: np.ndarray
    own_times: np.ndarray
    positive: int
    negatives: np.ndarray
    prediction_time: int


class _History:
    """Time-sorted check-in pool of a set of users with prefix lookups."""

    def __init__(self, users, pois, times):
        order = np.lexsort((pois, users, times))
        self.users = np.asarray(users, dtype=np.int64)[order]
        self.pois = np.asarray(pois, dtype=np.int64)[order]
        self.times = np.asarray(times, dtype=np.int64)[order]

    def before(self, t: int, limit: int):
        k = int(np.searchsorted(self.times, t, side="left"))
        s = max(0, k - limit)
        return self.users[s:k], self.pois[s:k], self.times[s:k]


def _pool(trajectories: list[Trajectory], n_users: int):
    per_user: list[list[tuple[int, int]]] = [[] for _ in range(n_users)]
    for tr in trajectories:
        for c in tr.checkins:
            per_user[c.user].append((c.poi, c.time))
    return per_user


def _histories(pool, friends, user):
    members = [user] + list(friends[user])
    us, ps, ts = [], [], []
    for m in members:
        for p, t in pool[m]:
            us.append(m)
            ps.append(p)
            ts.append(t)
    merged = _History(us, ps, ts)
    own = _History([user] * len(pool[user]), [p for p, _ in pool[user]], [t for _, t in pool[user]])
    return merged, own


class NegativeSampler:
    """Same-city uniform negatives with a popularity-weighted fallback.

    Only POIs observed in training (popularity > 0) are eligible.
    """

    def __init__(self, dataset: Dataset, n: int = 500, exponent: float = 1.0, seed: int = 0):
        self.n = n
        self.seed = seed
        self.popularity = np.asarray(dataset.poi_popularity, dtype=np.float64)
        self.observed = np.flatnonzero(self.popularity > 0)
        cells = [assign_city(p, dataset.cell_size_deg) for p in dataset.poi_coords]
        self.city_index: dict[tuple[int, int], np.ndarray] = {}
        for i in self.observed:
            self.city_index.setdefault(cells[i], []).append(int(i))
        self.city_index = {k: np.array(v, dtype=np.int64) for k, v in self.city_index.items()}
        self.cell_of = cells
        self.weights = self.popularity**exponent
        self._warned = False

    def sample(self, positive: int, key: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, key])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = sample_negatives(positive, self.cell_of, self.city_index, self.weights, self.n, rng, self.observed)
        if caught and not self._warned:
            self._warned = True
            log.warning("%s (further shortfalls not reported)", caught[0].message)
        return out


def sample_negatives(
    positive: int,
    cell_of,
    city_index: dict,
    weights: np.ndarray,
    n: int,
    rng: np.random.Generator,
    observed: np.ndarray | None = None,
) -> np.ndarray:
    """Up to ``n`` distinct negatives for ``positive``.

    Drawn uniformly without replacement from the positive's city cell; when
    the cell is too small the rest is drawn without replacement with
    probability proportional to ``weights`` over all other observed POIs.
    """
    weights = np.asarray(weights, dtype=np.float64)
    observed = np.flatnonzero(weights > 0) if observed is None else observed
    cell = city_index.get(cell_of[positive], np.zeros(0, dtype=np.int64))
    pool = cell[cell != positive]
    if len(pool) >= n:
        return np.sort(rng.choice(pool, size=n, replace=False))
    rest_n = n - len(pool)
    taken = np.zeros(len(weights), dtype=bool)
    taken[pool] = True
    taken[positive] = True
    cand = observed[~taken[observed]]
    if len(cand) < rest_n:
        warnings.warn(
            f"only {len(pool) + len(cand)} negatives available for POI {positive}, wanted {n}",
            stacklevel=2,
        )
        extra = cand
    else:
        w = weights[cand]
        extra = rng.choice(cand, size=rest_n, replace=False, p=w / w.sum())
    return np.concatenate([np.sort(pool), np.sort(extra)]).astype(np.int64)


def _instances_for(
    targets: list[Trajectory],
    pool,
    friends,
    sampler: NegativeSampler | None,
    stc_len: int,
    ltsc_len: int,
    start_id: int = 0,
) -> list[TrainingInstance]:
    out: list[TrainingInstance] = []
    cache: dict[int, tuple[_History, _History]] = {}
    iid = start_id
    for tr in targets:
        u = tr.user
        if u not in cache:
            cache[u] = _histories(pool, friends, u)
        merged, own = cache[u]
        cks = tr.checkins
        for j in range(1, len(cks)):
            target = cks[j]
            prefix = cks[max(0, j - stc_len) : j]
            lu, lp, lt = merged.before(target.time, ltsc_len)
            _, op, ot = own.before(target.time, ltsc_len)
            negs = sampler.sample(target.poi, iid) if sampler is not None else np.zeros(0, dtype=np.int64)
            out.append(
                TrainingInstance(
                    iid=iid,
                    user=u,
                    stc_pois=np.array([c.poi for c in prefix], dtype=np.int64),
                    stc_times=np.array([c.time for c in prefix], dtype=np.int64),
                    stc_positions=np.array([c.position for c in prefix], dtype=np.int64),
                    ltsc_users=lu,
                    ltsc_pois=lp,
                    ltsc_times=lt,
                    own_pois=op,
                    own_times=ot,
                    positive=target.poi,
                    negatives=negs,
                    prediction_time=target.time,
                )
            )
            iid += 1
    return out


def build_instances(
    dataset: Dataset,
    sampler: NegativeSampler | None,
    stc_len: int = 50,
    ltsc_len: int = 200,
) -> list[TrainingInstance]:
    """Training instances from train trajectories only.

    Histories use train check-ins exclusively, so nothing from a test
    trajectory leaks into training.
    """
    pool = _pool(dataset.train_trajectories, dataset.n_users)
    return _instances_for(dataset.train_trajectories, pool, dataset.friends(), sampler, stc_len, ltsc_len)


def build_test_instances(
    dataset: Dataset,
    sampler: NegativeSampler | None,
    stc_len: int = 50,
    ltsc_len: int = 200,
) -> list[TrainingInstance]:
    """Instances over test trajectories; history is every earlier check-in, train or test."""
    pool = _pool(dataset.train_trajectories + dataset.test_trajectories, dataset.n_users)
    return _instances_for(dataset.test_trajectories, pool, dataset.friends(), sampler, stc_len, ltsc_len)
