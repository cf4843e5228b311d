"""Top-k ranking evaluation: Recall@k, NDCG@k, per-batch timing."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .instances import TrainingInstance

# (instances, candidates (B, C)) -> scores (B, C)
Scorer = Callable[[list[TrainingInstance], np.ndarray], np.ndarray]


@dataclass
class RankedResult:
    user: int
    iid: int
    ranking: np.ndarray  # candidate POIs, best first
    true_poi: int

    @property
    def rank(self) -> int:
        """1-based rank of the true POI."""
        hit = np.flatnonzero(self.ranking == self.true_poi)
        if not len(hit):
            raise ValueError(f"true POI {self.true_poi} missing from candidates of instance {self.iid}")
        return int(hit[0]) + 1


@dataclass
class EvalReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    instances: int
    seconds_per_batch: float
    batch_size: int
    config: dict = field(default_factory=dict)
    baseline: dict | None = None

    def to_json(self) -> str:
        doc = asdict(self)
        doc["recall"] = {str(k): v for k, v in self.recall.items()}
        doc["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_table(self) -> str:
        ks = sorted(self.recall)
        head = "model".ljust(12) + "".join(f"R@{k}".rjust(10) + f"NDCG@{k}".rjust(10) for k in ks)
        rows = [head, "dansnr".ljust(12) + "".join(f"{self.recall[k]:10.4f}{self.ndcg[k]:10.4f}" for k in ks)]
        if self.baseline:
            rows.append(
                "popularity".ljust(12)
                + "".join(f"{self.baseline['recall'][str(k)]:10.4f}{self.baseline['ndcg'][str(k)]:10.4f}" for k in ks)
            )
        rows.append(f"instances: {self.instances}  seconds/batch({self.batch_size}): {self.seconds_per_batch:.4f}")
        return "\n".join(rows) + "\n"


def rank_candidates(cands: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Descending score; equal scores fall back to ascending POI index."""
    return cands[np.lexsort((cands, -scores))]


def recall_at_k(results: Sequence[RankedResult], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("no results to evaluate")
    return sum(1.0 for r in results if r.rank <= k) / len(results)


def ndcg_at_k(results: Sequence[RankedResult], k: int) -> float:
    """Single relevant item per instance, so the ideal DCG is 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("no results to evaluate")
    total = 0.0
    for r in results:
        j = r.rank
        if j <= k:
            total += 1.0 / math.log2(j + 1)
    return total / len(results)


def candidate_sets(instances: Sequence[TrainingInstance], policy: str, n_pois: int) -> tuple[np.ndarray, np.ndarray]:
    """(B, C) candidates with the true POI first, plus a validity mask.

    ``sampled`` uses each instance's negatives; ``full`` ranks the whole
    catalogue. Rows with fewer negatives are padded with the true POI and
    marked invalid.
    """
    if policy == "full":
        rows = [np.concatenate([[i.positive], np.delete(np.arange(n_pois), i.positive)]) for i in instances]
    elif policy == "sampled":
        rows = [np.concatenate([[i.positive], i.negatives]) for i in instances]
    else:
        raise ValueError(f"unknown candidate policy {policy!r}")
    width = max(len(r) for r in rows)
    cands = np.zeros((len(rows), width), dtype=np.int64)
    valid = np.zeros(cands.shape, dtype=bool)
    for i, (inst, r) in enumerate(zip(instances, rows)):
        cands[i] = inst.positive
        cands[i, : len(r)] = r
        valid[i, : len(r)] = True
    return cands, valid


def rank_all(
    scorer: Scorer,
    instances: Sequence[TrainingInstance],
    policy: str = "sampled",
    n_pois: int | None = None,
    batch_size: int = 50,
) -> tuple[list[RankedResult], float]:
    """Rankings for every instance and the mean wall time of a scoring batch."""
    if not instances:
        raise ValueError("no test instances")
    results: list[RankedResult] = []
    timings = []
    for s in range(0, len(instances), batch_size):
        chunk = list(instances[s : s + batch_size])
        cands, valid = candidate_sets(chunk, policy, n_pois or 0)
        t0 = time.perf_counter()
        scores = np.asarray(scorer(chunk, cands))
        timings.append(time.perf_counter() - t0)
        for inst, c, sc, ok in zip(chunk, cands, scores, valid):
            results.append(RankedResult(inst.user, inst.iid, rank_candidates(c[ok], sc[ok]), inst.positive))
    return results, float(np.mean(timings))


def evaluate(
    scorer: Scorer,
    instances: Sequence[TrainingInstance],
    k_list: Sequence[int] = (5, 10),
    policy: str = "sampled",
    n_pois: int | None = None,
    batch_size: int = 50,
    config: dict | None = None,
) -> EvalReport:
    results, secs = rank_all(scorer, instances, policy, n_pois, batch_size)
    return EvalReport(
        recall={k: recall_at_k(results, k) for k in k_list},
        ndcg={k: ndcg_at_k(results, k) for k in k_list},
        instances=len(results),
        seconds_per_batch=secs,
        batch_size=batch_size,
        config=dict(config or {}, policy=policy),
    )


def popularity_baseline(popularity: Sequence[int]) -> Scorer:
    """User-independent scorer: training visit count of each candidate."""
    pop = np.asarray(popularity, dtype=np.float64)

    def score(instances, cands):
        return pop[np.asarray(cands)]

    return score


def model_scorer(params) -> Scorer:
    from .model import score_instances

    def score(instances, cands):
        return score_instances(params, list(instances), cands)

    return score


def rankings_csv(results: Sequence[RankedResult], top: int = 10) -> str:
    rows = ["iid,user,true_poi,rank,top"]
    for r in results:
        rows.append(f"{r.iid},{r.user},{r.true_poi},{r.rank},{' '.join(str(int(p)) for p in r.ranking[:top])}")
    return "\n".join(rows) + "\n"
