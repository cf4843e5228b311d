"""Social-aware next-POI recommendation with two-channel self-attention.

Modules: ``ingest`` (parsing, filtering, trajectories), ``geo`` (distances,
L2L graph, city grid), ``graphembed`` (node2vec), ``numcore`` (reverse-mode
autodiff), ``model`` (the scorer), ``instances`` and ``train`` (BPR
training), ``evaluation`` (Recall/NDCG), ``cli``.
"""

__version__ = "0.1.0"
