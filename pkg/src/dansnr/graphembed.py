"""node2vec: second-order biased random walks plus skip-gram with negative sampling.

Used twice in the pipeline: on the friendship graph (user vectors) and on
the L2L proximity graph (location vectors). Both tables stay frozen once
trained.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

Adjacency = Mapping[Hashable, Sequence[tuple[Hashable, float]]]


@dataclass(frozen=True)
class WalkConfig:
    p: float = 1.0
    q: float = 1.0
    walk_len: int = 80
    walks_per_node: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.p <= 0 or self.q <= 0:
            raise ValueError("node2vec p and q must be positive")
        if self.walk_len < 1 or self.walks_per_node < 1:
            raise ValueError("walk_len and walks_per_node must be >= 1")


@dataclass
class EmbeddingTable:
    dim: int
    nodes: list
    vectors: np.ndarray
    loss_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._row = {n: i for i, n in enumerate(self.nodes)}

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node) -> bool:
        return node in self._row

    def matrix_for(self, nodes: Sequence) -> np.ndarray:
        """Rows for ``nodes`` in the given order (errors on unknown ids)."""
        return np.stack([embed_lookup(self, n) for n in nodes]) if len(nodes) else np.zeros((0, self.dim))

    def to_json(self) -> str:
        doc = {
            "format": "dansnr-embedding/1",
            "dim": self.dim,
            "count": len(self.nodes),
            "nodes": list(self.nodes),
            "vectors": self.vectors.tolist(),
        }
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EmbeddingTable":
        doc = json.loads(text)
        vec = np.array(doc["vectors"], dtype=np.float64).reshape(doc["count"], doc["dim"])
        return cls(doc["dim"], doc["nodes"], vec)


def embed_lookup(table: EmbeddingTable, node) -> np.ndarray:
    try:
        return table.vectors[table._row[node]]
    except KeyError:
        raise KeyError(f"node {node!r} not in embedding table") from None


# -------------------------------------------------------------------- walks


def random_walks(adjacency: Adjacency, cfg: WalkConfig, nodes: Sequence | None = None) -> list[list]:
    """``walks_per_node`` biased walks from every node, in round-major order.

    Each walk draws from its own generator seeded by (seed, node position,
    walk number), so walks can be produced independently of each other.
    """
    nodes = list(adjacency) if nodes is None else list(nodes)
    if not nodes:
        raise ValueError("graph has no nodes")
    nbrs = {}
    wts = {}
    for n in nodes:
        pairs = adjacency.get(n, ())
        nbrs[n] = [x for x, _ in pairs]
        wts[n] = np.array([w for _, w in pairs], dtype=np.float64)
    nbr_sets = {n: set(v) for n, v in nbrs.items()}
    inv_p, inv_q = 1.0 / cfg.p, 1.0 / cfg.q

    def pick(rng, weights):
        total = weights.sum()
        if total <= 0:
            return None
        cum = np.cumsum(weights)
        return int(np.searchsorted(cum, rng.random() * total, side="right").clip(0, len(weights) - 1))

    walks = []
    for r in range(cfg.walks_per_node):
        for i, start in enumerate(nodes):
            rng = np.random.default_rng([cfg.seed, i, r])
            walk = [start]
            while len(walk) < cfg.walk_len:
                cur = walk[-1]
                cand = nbrs.get(cur, [])
                if not cand:
                    break
                if len(walk) == 1:
                    bias = wts[cur]
                else:
                    prev = walk[-2]
                    prev_nb = nbr_sets.get(prev, set())
                    mult = np.array(
                        [inv_p if x == prev else (1.0 if x in prev_nb else inv_q) for x in cand]
                    )
                    bias = wts[cur] * mult
                j = pick(rng, bias)
                if j is None:
                    break
                walk.append(cand[j])
            walks.append(walk)
    return walks


# ----------------------------------------------------------------- skipgram


def skipgram_pairs(walks: Sequence[Sequence], window: int) -> list[tuple]:
    """All (center, context) pairs within ``window`` positions on either side."""
    pairs = []
    for walk in walks:
        for i, c in enumerate(walk):
            for j in range(max(0, i - window), min(len(walk), i + window + 1)):
                if j != i:
                    pairs.append((c, walk[j]))
    return pairs


def train_skipgram(
    walks: Sequence[Sequence],
    nodes: Sequence | None = None,
    dim: int = 256,
    window: int = 10,
    negatives: int = 5,
    epochs: int = 1,
    lr: float = 0.025,
    seed: int = 0,
    batch_size: int = 256,
) -> EmbeddingTable:
    """Skip-gram with negative sampling over walk co-occurrences.

    Negatives come from the unigram^0.75 distribution of walk tokens. The
    learning rate decays linearly to 1e-4 * lr over all updates, as in
    word2vec. Returns the center-vector table; the per-batch loss is kept
    in ``loss_history``.
    """
    if not walks:
        raise ValueError("no walks to train on")
    seen = []
    seen_set = set()
    for w in walks:
        for n in w:
            if n not in seen_set:
                seen_set.add(n)
                seen.append(n)
    nodes = list(seen) if nodes is None else list(nodes)
    row = {n: i for i, n in enumerate(nodes)}
    missing = [n for n in nodes if n not in seen_set]
    if missing:
        log.warning("%d node(s) never appear in walks; their vectors stay zero", len(missing))

    rng = np.random.default_rng(seed)
    n = len(nodes)
    center = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n, dim))
    context = np.zeros((n, dim))
    for m in missing:
        center[row[m]] = 0.0
    table = EmbeddingTable(dim, nodes, center)
    if epochs <= 0:
        return table

    counts = np.zeros(n)
    for w in walks:
        for tok in w:
            counts[row[tok]] += 1
    noise = counts**0.75
    noise /= noise.sum()
    noise_cum = np.cumsum(noise)

    pairs = np.array([(row[a], row[b]) for a, b in skipgram_pairs(walks, window)], dtype=np.int64)
    if pairs.size == 0:
        return table
    steps_total = epochs * int(np.ceil(len(pairs) / batch_size))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for s in range(0, len(pairs), batch_size):
            alpha = lr * max(1e-4, 1.0 - step / steps_total)
            step += 1
            batch = pairs[order[s : s + batch_size]]
            c, o = batch[:, 0], batch[:, 1]
            neg = np.searchsorted(noise_cum, rng.random((len(batch), negatives)) * noise_cum[-1], side="right")
            neg = neg.clip(0, n - 1)
            targets = np.concatenate([o[:, None], neg], axis=1)  # (b, 1+neg)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            vc = center[c]  # (b, dim)
            vt = context[targets]  # (b, 1+neg, dim)
            logits = np.einsum("bd,bkd->bk", vc, vt)
            sig = 1.0 / (1.0 + np.exp(-logits))
            pos_term = np.log(np.maximum(sig[:, 0], 1e-12))
            neg_term = np.log(np.maximum(1.0 - sig[:, 1:], 1e-12)).sum(axis=1)
            table.loss_history.append(float(-(pos_term + neg_term).mean()))
            err = (labels - sig) * alpha  # gradient ascent on log-likelihood
            np.add.at(context, targets, err[..., None] * vc[:, None, :])
            np.add.at(center, c, np.einsum("bk,bkd->bd", err, vt))
    for m in missing:
        center[row[m]] = 0.0
    return table


def embed_graph(
    adjacency: Adjacency,
    nodes: Sequence,
    walk_cfg: WalkConfig,
    dim: int,
    window: int = 10,
    negatives: int = 5,
    epochs: int = 1,
    lr: float = 0.025,
) -> EmbeddingTable:
    """Walks then skip-gram; every node in ``nodes`` gets a row."""
    walks = random_walks(adjacency, walk_cfg, nodes)
    return train_skipgram(
        walks, nodes=nodes, dim=dim, window=window, negatives=negatives,
        epochs=epochs, lr=lr, seed=walk_cfg.seed,
    )


def friend_adjacency(n_users: int, edges: Sequence[tuple[int, int]]) -> dict[int, list[tuple[int, float]]]:
    adj: dict[int, list[tuple[int, float]]] = {u: [] for u in range(n_users)}
    for a, b in edges:
        adj[a].append((b, 1.0))
        adj[b].append((a, 1.0))
    return {u: sorted(v) for u, v in adj.items()}


def proximity_adjacency(l2l_adjacency: Adjacency) -> dict:
    """Turn km edge weights into walk weights 1 / (1 + km): nearer is likelier."""
    return {a: [(b, 1.0 / (1.0 + w)) for b, w in nb] for a, nb in l2l_adjacency.items()}
