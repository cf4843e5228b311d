"""Great-circle distances, the POI proximity (L2L) graph and the city grid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

EARTH_RADIUS_KM = 6371.0
BRUTE_FORCE_LIMIT = 50_000


class GeoPoint(NamedTuple):
    lat: float
    lon: float


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km on a sphere of radius 6371 km."""
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dp = p2 - p1
    dl = math.radians(b.lon - a.lon)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def haversine_matrix(lat: np.ndarray, lon: np.ndarray, lat2=None, lon2=None) -> np.ndarray:
    """Pairwise distances (km) between two point sets given in degrees."""
    lat2 = lat if lat2 is None else lat2
    lon2 = lon if lon2 is None else lon2
    p1 = np.radians(lat)[:, None]
    p2 = np.radians(lat2)[None, :]
    dl = np.radians(lon2)[None, :] - np.radians(lon)[:, None]
    h = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


@dataclass
class L2LGraph:
    """Undirected weighted POI graph; weights are distances in km."""

    nodes: list[int]
    adjacency: dict[int, list[tuple[int, float]]]
    directed_knn: dict[int, list[int]]

    def edges(self) -> list[tuple[int, int, float]]:
        return [(a, b, w) for a in self.nodes for b, w in self.adjacency[a] if a < b]

    def to_edgelist(self) -> str:
        return "".join(f"{a}\t{b}\t{w:.6f}\n" for a, b, w in self.edges())


def _knn_rows(lat, lon, rows: np.ndarray, k: int) -> list[list[tuple[int, float]]]:
    d = haversine_matrix(lat[rows], lon[rows], lat, lon)
    n = lat.shape[0]
    out = []
    ids = np.arange(n)
    for r, i in enumerate(rows):
        # lexsort: primary distance, secondary index (lower index wins ties)
        order = np.lexsort((ids, d[r]))
        out.append([(int(j), float(d[r, j])) for j in order if j != i][:k])
    return out


def build_l2l_graph(points: list[tuple[int, GeoPoint]], k: int = 20) -> L2LGraph:
    """Link each POI to its ``k`` nearest POIs, then symmetrise by union."""
    if len(points) < 2:
        raise ValueError("L2L graph needs at least two POIs")
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = [p for p, _ in points]
    lat = np.array([g.lat for _, g in points], dtype=np.float64)
    lon = np.array([g.lon for _, g in points], dtype=np.float64)
    n = len(ids)
    k = min(k, n - 1)
    # order by id so that positional ties resolve to the lower PoiIdx
    perm = np.argsort(np.array(ids), kind="stable")
    lat, lon = lat[perm], lon[perm]
    sorted_ids = [ids[i] for i in perm]

    knn: dict[int, list[tuple[int, float]]] = {}
    if n <= BRUTE_FORCE_LIMIT:
        chunk = 2048
        for start in range(0, n, chunk):
            rows = np.arange(start, min(n, start + chunk))
            for i, nb in zip(rows, _knn_rows(lat, lon, rows, k)):
                knn[sorted_ids[i]] = [(sorted_ids[j], w) for j, w in nb]
    else:
        knn = _knn_grid(sorted_ids, lat, lon, k)

    adj: dict[int, dict[int, float]] = {pid: {} for pid in sorted_ids}
    for a, nbs in knn.items():
        for b, w in nbs:
            adj[a][b] = w
            adj[b][a] = w
    adjacency = {a: sorted(nb.items()) for a, nb in adj.items()}
    return L2LGraph(
        nodes=sorted_ids,
        adjacency=adjacency,
        directed_knn={a: [b for b, _ in nbs] for a, nbs in knn.items()},
    )


def _knn_grid(ids, lat, lon, k):
    """k-NN for large point sets: candidates from a coarse lat/lon bucket ring.

    The ring grows until it holds more than k points and then one more ring
    is added, which bounds the true k-th neighbour for moderate latitudes.
    """
    n = len(ids)
    cell = max(0.05, math.sqrt(180.0 * 360.0 * (4 * k) / n))
    keys = np.stack([np.floor(lat / cell), np.floor(lon / cell)], axis=1).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (a, b) in enumerate(keys):
        buckets.setdefault((int(a), int(b)), []).append(i)
    out = {}
    for i in range(n):
        ci, cj = keys[i]
        r, cand = 0, []
        while True:
            cand = [
                j
                for a in range(ci - r, ci + r + 1)
                for b in range(cj - r, cj + r + 1)
                for j in buckets.get((int(a), int(b)), ())
            ]
            if len(cand) > k or len(cand) == n:
                break
            r += 1
        r += 1
        cand = np.array(
            [j for a in range(ci - r, ci + r + 1) for b in range(cj - r, cj + r + 1) for j in buckets.get((int(a), int(b)), ())]
        )
        d = haversine_matrix(lat[i : i + 1], lon[i : i + 1], lat[cand], lon[cand])[0]
        order = np.lexsort((cand, d))
        out[ids[i]] = [(ids[int(cand[j])], float(d[j])) for j in order if cand[j] != i][:k]
    return out


def assign_city(p: GeoPoint, cell_size_deg: float = 0.5) -> tuple[int, int]:
    return (math.floor(p.lat / cell_size_deg), math.floor(p.lon / cell_size_deg))


def build_city_index(coords: list[GeoPoint], cell_size_deg: float = 0.5) -> dict[tuple[int, int], list[int]]:
    """Grid cell -> POI indices, each POI in exactly one cell."""
    index: dict[tuple[int, int], list[int]] = {}
    for i, p in enumerate(coords):
        index.setdefault(assign_city(p, cell_size_deg), []).append(i)
    return index
