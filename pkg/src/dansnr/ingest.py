"""Check-in and friendship ingestion, filtering, trajectory splitting.

Input follows the public Gowalla/Brightkite dumps: check-ins are
``user<TAB>ISO-8601 time<TAB>lat<TAB>lon<TAB>location id`` and edges are
``userA<TAB>userB``. Everything downstream works on dense integer indices.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable

from .geo import GeoPoint, build_city_index

log = logging.getLogger(__name__)

SIX_HOURS = 6 * 3600
ARCHIVE_FORMAT = "dansnr-dataset/1"


class DataError(ValueError):
    """Input data that cannot produce a usable dataset."""


@dataclass(frozen=True, slots=True)
class RawCheckIn:
    user_id: str
    timestamp: int  # UTC seconds since epoch
    lat: float
    lon: float
    poi_id: str


@dataclass(frozen=True, slots=True)
class CheckIn:
    user: int
    poi: int
    location: int
    time: int
    position: int


@dataclass(slots=True)
class Trajectory:
    user: int
    checkins: list[CheckIn]

    @property
    def start(self) -> int:
        return self.checkins[0].time

    def __len__(self) -> int:
        return len(self.checkins)


@dataclass
class SkipReport:
    total: int = 0
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def add(self, lineno: int, reason: str) -> None:
        self.skipped.append((lineno, reason))

    def render(self) -> str:
        lines = [f"lines read: {self.total}", f"lines skipped: {len(self.skipped)}"]
        lines += [f"line {n}: {why}" for n, why in self.skipped]
        return "\n".join(lines) + "\n"


@dataclass
class Dataset:
    """Preprocessed LBSN: index maps, friendships, chronologically split trajectories."""

    user_ids: list[str]
    poi_ids: list[str]
    poi_coords: list[GeoPoint]
    friend_edges: list[tuple[int, int]]
    train_trajectories: list[Trajectory]
    test_trajectories: list[Trajectory]
    poi_popularity: list[int]
    cell_size_deg: float = 0.5

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_pois(self) -> int:
        return len(self.poi_ids)

    def poi_location(self, poi: int) -> int:
        # POIs and locations share one raw id in the supported dumps
        return poi

    def friends(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_users)]
        for a, b in self.friend_edges:
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(x) for x in adj]

    def city_index(self) -> dict[tuple[int, int], list[int]]:
        return build_city_index(self.poi_coords, self.cell_size_deg)

    def summary(self) -> dict[str, int]:
        trajs = self.train_trajectories + self.test_trajectories
        return {
            "users": self.n_users,
            "checkins": sum(len(t) for t in trajs),
            "pois": self.n_pois,
            "friendships": len(self.friend_edges),
            "trajectories": len(trajs),
            "train_trajectories": len(self.train_trajectories),
            "test_trajectories": len(self.test_trajectories),
        }

    # -------------------------------------------------------------- archive

    def to_json(self) -> str:
        """Canonical JSON archive; identical datasets give identical bytes."""

        def enc(trajs):
            return [[t.user, [[c.poi, c.time] for c in t.checkins]] for t in trajs]

        doc = {
            "format": ARCHIVE_FORMAT,
            "users": self.user_ids,
            "pois": [[pid, p.lat, p.lon] for pid, p in zip(self.poi_ids, self.poi_coords)],
            "friend_edges": [list(e) for e in self.friend_edges],
            "train": enc(self.train_trajectories),
            "test": enc(self.test_trajectories),
            "popularity": self.poi_popularity,
            "cell_size_deg": self.cell_size_deg,
            "city_index": [[list(k), v] for k, v in sorted(self.city_index().items())],
        }
        return json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        if doc.get("format") != ARCHIVE_FORMAT:
            raise DataError(f"not a dataset archive (format={doc.get('format')!r})")

        def dec(rows):
            out = []
            for user, cks in rows:
                out.append(
                    Trajectory(user, [CheckIn(user, p, p, t, i + 1) for i, (p, t) in enumerate(cks)])
                )
            return out

        return cls(
            user_ids=doc["users"],
            poi_ids=[p[0] for p in doc["pois"]],
            poi_coords=[GeoPoint(p[1], p[2]) for p in doc["pois"]],
            friend_edges=[tuple(e) for e in doc["friend_edges"]],
            train_trajectories=dec(doc["train"]),
            test_trajectories=dec(doc["test"]),
            poi_popularity=doc["popularity"],
            cell_size_deg=doc["cell_size_deg"],
        )


# ------------------------------------------------------------------ parsing


def _parse_time(s: str) -> int:
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_checkins(lines: Iterable[str], report: SkipReport | None = None) -> list[RawCheckIn]:
    """Parse check-in lines, skipping malformed ones into ``report``.

    Raises DataError when more than half of the non-blank lines are
    malformed, which usually means the wrong file was passed.
    """
    report = report if report is not None else SkipReport()
    out: list[RawCheckIn] = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        report.total += 1
        parts = line.split("\t")
        if len(parts) != 5:
            report.add(lineno, f"expected 5 fields, got {len(parts)}")
            continue
        user, ts, lat_s, lon_s, poi = (p.strip() for p in parts)
        if not user or not poi:
            report.add(lineno, "empty user or location id")
            continue
        try:
            t = _parse_time(ts)
            lat, lon = float(lat_s), float(lon_s)
        except ValueError as e:
            report.add(lineno, f"unparseable field: {e}")
            continue
        if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
            report.add(lineno, f"coordinates out of range: {lat}, {lon}")
            continue
        out.append(RawCheckIn(user, t, lat, lon, poi))
    if report.total and len(report.skipped) * 2 > report.total:
        raise DataError(
            f"{len(report.skipped)} of {report.total} check-in lines malformed; wrong file?"
        )
    return out


def parse_edges(lines: Iterable[str], report: SkipReport | None = None) -> list[tuple[str, str]]:
    """Undirected, deduplicated friendship pairs without self-loops."""
    report = report if report is not None else SkipReport()
    seen: set[tuple[str, str]] = set()
    out: list[tuple[str, str]] = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        report.total += 1
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != 2 or not all(parts):
            report.add(lineno, "expected two user ids")
            continue
        a, b = parts
        if a == b:
            continue
        key = (a, b) if a <= b else (b, a)
        if key not in seen:
            seen.add(key)
            out.append(key)
    return out


# ---------------------------------------------------------------- splitting


def split_trajectories(checkins: list[CheckIn], threshold: int = SIX_HOURS) -> list[Trajectory]:
    """Cut a user's time-sorted check-ins wherever the gap exceeds ``threshold`` seconds.

    A gap exactly equal to the threshold stays in the same session.
    Positions are renumbered 1..len inside each trajectory.
    """
    if not checkins:
        return []
    for a, b in zip(checkins, checkins[1:]):
        if b.time < a.time:
            raise ValueError("split_trajectories requires time-sorted check-ins")
    groups: list[list[CheckIn]] = [[checkins[0]]]
    for prev, cur in zip(checkins, checkins[1:]):
        if cur.time - prev.time > threshold:
            groups.append([])
        groups[-1].append(cur)
    user = checkins[0].user
    return [
        Trajectory(user, [CheckIn(c.user, c.poi, c.location, c.time, i + 1) for i, c in enumerate(g)])
        for g in groups
    ]


def chrono_split(
    trajectories: list[Trajectory], ratio: float = 0.8
) -> tuple[list[Trajectory], list[Trajectory]]:
    """First ceil(ratio * n) trajectories to train, the rest to test (one user)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    trajs = sorted(trajectories, key=lambda t: t.start)
    cut = math.ceil(ratio * len(trajs))
    return trajs[:cut], trajs[cut:]


# ---------------------------------------------------------------- filtering


def filter_dataset(
    raw: list[RawCheckIn],
    edges: list[tuple[str, str]],
    min_user: int = 20,
    min_poi: int = 20,
    min_traj: int = 5,
    threshold: int = SIX_HOURS,
    ratio: float = 0.8,
    cell_size_deg: float = 0.5,
) -> Dataset:
    """Apply activity thresholds to a fixed point and build the split dataset.

    Each round drops users below ``min_user`` check-ins and POIs below
    ``min_poi`` visits until both are stable, then splits sessions and drops
    users with fewer than ``min_traj`` trajectories; rounds repeat until
    nothing changes.
    """
    if min(min_user, min_poi, min_traj) < 1:
        raise ValueError("filter thresholds must be >= 1")
    # stable sort keeps input order for equal timestamps
    order = sorted(range(len(raw)), key=lambda i: raw[i].timestamp)
    rows = [raw[i] for i in order]

    users = set(r.user_id for r in rows)
    pois = set(r.poi_id for r in rows)
    while True:
        before = (len(users), len(pois))
        while True:
            inner = (len(users), len(pois))
            ucount = Counter(r.user_id for r in rows if r.user_id in users and r.poi_id in pois)
            users = {u for u in users if ucount[u] >= min_user}
            pcount = Counter(r.poi_id for r in rows if r.user_id in users and r.poi_id in pois)
            pois = {p for p in pois if pcount[p] >= min_poi}
            if (len(users), len(pois)) == inner:
                break
        per_user: dict[str, list[int]] = defaultdict(list)
        for r in rows:
            if r.user_id in users and r.poi_id in pois:
                per_user[r.user_id].append(r.timestamp)
        for u, times in per_user.items():
            if _count_sessions(times, threshold) < min_traj:
                users.discard(u)
        if (len(users), len(pois)) == before:
            break

    kept = [r for r in raw if r.user_id in users and r.poi_id in pois]
    if not kept:
        raise DataError("dataset exhausted by filters")

    uidx: dict[str, int] = {}
    pidx: dict[str, int] = {}
    coords: list[GeoPoint] = []
    for r in kept:
        uidx.setdefault(r.user_id, len(uidx))
        if r.poi_id not in pidx:
            pidx[r.poi_id] = len(pidx)
            coords.append(GeoPoint(r.lat, r.lon))

    by_user: list[list[CheckIn]] = [[] for _ in uidx]
    for r in rows:
        if r.user_id in users and r.poi_id in pois:
            u, p = uidx[r.user_id], pidx[r.poi_id]
            by_user[u].append(CheckIn(u, p, p, r.timestamp, 0))

    train: list[Trajectory] = []
    test: list[Trajectory] = []
    for cks in by_user:
        tr, te = chrono_split(split_trajectories(cks, threshold), ratio)
        train += tr
        test += te

    popularity = [0] * len(pidx)
    for t in train:
        for c in t.checkins:
            popularity[c.poi] += 1

    friend_edges = sorted(
        {
            (min(uidx[a], uidx[b]), max(uidx[a], uidx[b]))
            for a, b in edges
            if a in uidx and b in uidx
        }
    )
    return Dataset(
        user_ids=list(uidx),
        poi_ids=list(pidx),
        poi_coords=coords,
        friend_edges=friend_edges,
        train_trajectories=train,
        test_trajectories=test,
        poi_popularity=popularity,
        cell_size_deg=cell_size_deg,
    )


def _count_sessions(times: list[int], threshold: int) -> int:
    return 1 + sum(1 for a, b in zip(times, times[1:]) if b - a > threshold) if times else 0


def load_dataset(checkins_path, edges_path, **filter_kw) -> tuple[Dataset, SkipReport, SkipReport]:
    ck_report, edge_report = SkipReport(), SkipReport()
    with open(checkins_path, encoding="utf-8") as fh:
        raw = parse_checkins(fh, ck_report)
    with open(edges_path, encoding="utf-8") as fh:
        edges = parse_edges(fh, edge_report)
    log.info("parsed %d check-ins, %d edges", len(raw), len(edges))
    return filter_dataset(raw, edges, **filter_kw), ck_report, edge_report
