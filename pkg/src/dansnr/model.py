"""Two-channel self-attention scorer for next-POI recommendation.

The short-term channel (STC) reads the current trajectory with position
encodings; the long-term and social channel (LTSC) reads the time-sorted
history of the user and direct friends. Each channel runs K blocks of
multi-head self-attention and a feed-forward layer, then attends over its
outputs with the candidate POI's representation. The score adds both
channel terms and the user-POI dot product.

Everything is batched: a :class:`Batch` pads sequences to a common length
and masks the padding out of every softmax and every mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .instances import TrainingInstance
from .numcore import Tensor

VARIANTS = ("full", "self-only", "social-only", "long-only", "short-only")
CKPT_MAGIC = b"DANSNR-CKPT 1\n"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 256
    heads: int = 8
    layers: int = 6
    stc_len: int = 50
    ltsc_len: int = 200
    time_buckets: int = 16
    variant: str = "full"
    scale: str = "full"  # "full": sqrt(d) in every softmax; "per-head": sqrt(d / heads) in self-attention
    literal_mean: bool = True  # divide the attended sum by the number of check-ins

    def __post_init__(self):
        for name in ("d", "heads", "stc_len", "ltsc_len", "time_buckets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.stc_len > self.ltsc_len:
            raise ValueError("STC length must not exceed LTSC length")
        if self.layers < 1:
            raise ValueError("need at least one nonlinear layer")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.scale not in ("full", "per-head"):
            raise ValueError("scale must be 'full' or 'per-head'")

    @property
    def uses_stc(self) -> bool:
        return self.variant in ("full", "self-only", "short-only")

    @property
    def uses_ltsc(self) -> bool:
        return self.variant != "short-only"


# ------------------------------------------------------------------ encoders


def time_bucket(elapsed_hours, buckets: int = 16):
    """Exponential time slices: [0,1) -> 0, [1,2) -> 1, [2,4) -> 2, ..., clamped."""
    h = np.asarray(elapsed_hours, dtype=np.float64)
    if np.any(h < 0):
        raise ValueError("check-in after the prediction time (negative elapsed time)")
    # frexp gives h = m * 2**e with m in [0.5, 1), so floor(log2 h) = e - 1 exactly
    _, e = np.frexp(h)
    b = np.where(h < 1.0, 0, e).clip(0, buckets - 1)
    return int(b) if b.ndim == 0 else b.astype(np.int64)


def position_encoding(p, d: int) -> np.ndarray:
    """Sinusoid timing signal: sin on even components, cos on odd ones."""
    p = np.asarray(p, dtype=np.float64)
    i2 = np.arange(0, d, 2, dtype=np.float64)
    angle = p[..., None] / np.power(10000.0, i2 / d)
    out = np.empty(p.shape + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle[..., : d // 2])
    return out


# -------------------------------------------------------------------- params


class ModelParams:
    """Trainable tensors plus the frozen user and location tables."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor], user_table: np.ndarray, loc_table: np.ndarray):
        self.cfg = cfg
        self.tensors = tensors
        self.user_table = np.asarray(user_table, dtype=np.float64)
        self.loc_table = np.asarray(loc_table, dtype=np.float64)
        for name, t in tensors.items():
            t.name = name
        if self.user_table.shape[1] != cfg.d or self.loc_table.shape[1] != cfg.d:
            raise ValueError("frozen embedding tables must have width d")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def n_pois(self) -> int:
        return self.tensors["poi_table"].shape[0]

    def trainable(self) -> dict[str, Tensor]:
        return self.tensors

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.cfg,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
            self.user_table,
            self.loc_table,
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    # ---------------------------------------------------------- checkpoints

    def save(self, path, frozen_refs: dict[str, str] | None = None) -> None:
        """Write a checkpoint: magic line, JSON header line, raw float64 blobs.

        The header holds the config, every tensor's name/shape/byte offset
        (trainable tensors first, then ``user_table`` and ``loc_table``) and
        the paths the frozen tables were loaded from.
        """
        arrays = dict(self.state())
        arrays["user_table"] = self.user_table
        arrays["loc_table"] = self.loc_table
        entries, offset = [], 0
        for name, a in arrays.items():
            nbytes = a.size * 8
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "frozen": name in ("user_table", "loc_table")})
            offset += nbytes
        header = {"config": asdict(self.cfg), "tensors": entries, "frozen_refs": frozen_refs or {}, "dtype": "<f8"}
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for a in arrays.values():
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        raw = Path(path).read_bytes()
        if not raw.startswith(CKPT_MAGIC):
            raise ValueError(f"{path} is not a checkpoint")
        nl = raw.index(b"\n", len(CKPT_MAGIC))
        header = json.loads(raw[len(CKPT_MAGIC) : nl])
        body = raw[nl + 1 :]
        arrays = {}
        for e in header["tensors"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            arrays[e["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
        cfg = ModelConfig(**header["config"])
        user, loc = arrays.pop("user_table"), arrays.pop("loc_table")
        return cls(cfg, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}, user, loc)


def _glorot(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, n_pois: int, user_table: np.ndarray, loc_table: np.ndarray, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = cfg.d
    names = ["W_u", "W_v", "W_l", "W_t", "W_p"]
    t: dict[str, np.ndarray] = {n: _glorot(rng, (d, d)) for n in names}
    t["time_table"] = _glorot(rng, (cfg.time_buckets, d))
    t["poi_table"] = _glorot(rng, (n_pois, d))
    channels = [c for c, used in (("s", cfg.uses_stc), ("l", cfg.uses_ltsc)) if used]
    for c in channels:
        for k in range(1, cfg.layers + 1):
            pre = f"{c}{k}."
            t[pre + "W_att"] = _glorot(rng, (d, d))
            t[pre + "W_1"] = _glorot(rng, (d, d))
            t[pre + "W_2"] = _glorot(rng, (d, d))
            t[pre + "ln1_gain"] = np.ones(d)
            t[pre + "ln1_bias"] = np.zeros(d)
            t[pre + "ln2_gain"] = np.ones(d)
            t[pre + "ln2_bias"] = np.zeros(d)
    return ModelParams(cfg, {k: Tensor(v, requires_grad=True) for k, v in t.items()}, user_table, loc_table)


# --------------------------------------------------------------------- batch


@dataclass
class Batch:
    """Padded, masked arrays for a list of instances (padding on the right)."""

    users: np.ndarray  # (B,)
    stc_pois: np.ndarray  # (B, Ms)
    stc_buckets: np.ndarray
    stc_positions: np.ndarray
    stc_mask: np.ndarray
    ltsc_users: np.ndarray  # (B, Ls)
    ltsc_pois: np.ndarray
    ltsc_buckets: np.ndarray
    ltsc_mask: np.ndarray
    ltsc_times: np.ndarray
    stc_times: np.ndarray
    next_position: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return len(self.users)


def _pad(rows, width, fill=0):
    out = np.full((len(rows), max(width, 1)), fill, dtype=np.int64)
    mask = np.zeros(out.shape, dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        mask[i, : len(r)] = True
    return out, mask


def ltsc_view(inst: TrainingInstance, variant: str):
    """(users, pois, times) the long-term channel reads under ``variant``."""
    if variant == "full":
        return inst.ltsc_users, inst.ltsc_pois, inst.ltsc_times
    if variant == "social-only":
        keep = inst.ltsc_users != inst.user
        if keep.any():
            return inst.ltsc_users[keep], inst.ltsc_pois[keep], inst.ltsc_times[keep]
    own = np.full(len(inst.own_pois), inst.user, dtype=np.int64)
    return own, inst.own_pois, inst.own_times


def make_batch(instances: list[TrainingInstance], cfg: ModelConfig, pad_stc: int | None = None, pad_ltsc: int | None = None) -> Batch:
    """Pad to the longest sequence in the batch (or to ``pad_*`` if larger)."""
    stc, ltsc = [], []
    for inst in instances:
        if len(inst.stc_pois) == 0:
            raise ValueError(f"instance {inst.iid} has an empty current trajectory")
        m = slice(max(0, len(inst.stc_pois) - cfg.stc_len), None)
        stc.append((inst.stc_pois[m], inst.stc_times[m], inst.stc_positions[m]))
        lu, lp, lt = ltsc_view(inst, cfg.variant)
        s = slice(max(0, len(lp) - cfg.ltsc_len), None)
        if cfg.uses_ltsc and len(lp) == 0:
            raise ValueError(f"instance {inst.iid} has no history for the long-term channel")
        ltsc.append((lu[s], lp[s], lt[s]))
    ms = max(max(len(s[0]) for s in stc), pad_stc or 0)
    ls = max(max(len(s[1]) for s in ltsc), pad_ltsc or 0, 1)
    pt = np.array([i.prediction_time for i in instances], dtype=np.int64)

    def buckets(times_rows, width):
        rows = [time_bucket((t_pred - np.asarray(t)) / 3600.0, cfg.time_buckets) if len(t) else [] for t, t_pred in zip(times_rows, pt)]
        return _pad(rows, width)[0]

    stc_pois, stc_mask = _pad([s[0] for s in stc], ms)
    ltsc_pois, ltsc_mask = _pad([s[1] for s in ltsc], ls)
    return Batch(
        users=np.array([i.user for i in instances], dtype=np.int64),
        stc_pois=stc_pois,
        stc_buckets=buckets([s[1] for s in stc], ms),
        stc_positions=_pad([s[2] for s in stc], ms, fill=1)[0],
        stc_mask=stc_mask,
        ltsc_users=_pad([s[0] for s in ltsc], ls)[0],
        ltsc_pois=ltsc_pois,
        ltsc_buckets=buckets([s[2] for s in ltsc], ls),
        ltsc_mask=ltsc_mask,
        ltsc_times=_pad([s[2] for s in ltsc], ls)[0],
        stc_times=_pad([s[1] for s in stc], ms)[0],
        next_position=np.array([s[2][-1] + 1 for s in stc], dtype=np.int64),
    )


# ------------------------------------------------------------------- network


def _project(x: np.ndarray | Tensor, W: Tensor) -> Tensor:
    """Row-vector form of ``W x`` for every row of ``x``."""
    return nc.matmul(x if isinstance(x, Tensor) else Tensor(x), nc.transpose(W))


def embed_checkins(params: ModelParams, users, pois, buckets, positions=None) -> Tensor:
    """sigmoid(W_u u + W_v v + W_l l + W_t t [+ W_p p]) for index arrays of any leading shape.

    Passing ``positions`` gives the short-term form; omitting it gives the
    long-term form without a position term.
    """
    cfg = params.cfg
    users = np.asarray(users)
    pois = np.asarray(pois)
    if users.size and (users.min() < 0 or users.max() >= params.user_table.shape[0]):
        raise IndexError("unknown user index")
    if pois.size and (pois.min() < 0 or pois.max() >= params.n_pois):
        raise IndexError("unknown POI index")
    terms = [
        _project(params.user_table[users], params["W_u"]),
        _project(nc.gather(params["poi_table"], pois), params["W_v"]),
        # locations share POI indices
        _project(params.loc_table[pois], params["W_l"]),
        _project(nc.gather(params["time_table"], np.asarray(buckets)), params["W_t"]),
    ]
    if positions is not None:
        terms.append(_project(position_encoding(positions, cfg.d), params["W_p"]))
    return nc.sigmoid(nc.add_n(terms))


def attention_block(params: ModelParams, C: Tensor, mask: np.ndarray, channel: str, k: int, record: list | None = None) -> Tensor:
    """One nonlinear layer: multi-head self-attention, residual + norm, feed-forward, residual + norm.

    Queries, keys and values are the head slices of ``C`` itself; scores are
    divided by sqrt(d) (or sqrt(d / heads) with ``scale="per-head"``).
    """
    cfg = params.cfg
    pre = f"{channel}{k}."
    denom = math.sqrt(cfg.d if cfg.scale == "full" else cfg.d // cfg.heads)
    heads = nc.split_heads(C, cfg.heads)  # (..., H, n, dh)
    scores = nc.scale(nc.matmul(heads, nc.transpose(heads)), 1.0 / denom)
    key_mask = mask[..., None, None, :]
    A = nc.softmax(scores, key_mask)
    if record is not None:
        record.append(A.data)
    r = nc.matmul(nc.merge_heads(nc.matmul(A, heads)), params[pre + "W_att"])
    g = nc.layer_norm(nc.add(C, r), params[pre + "ln1_gain"], params[pre + "ln1_bias"])
    f = nc.matmul(nc.relu(nc.matmul(g, params[pre + "W_1"])), params[pre + "W_2"])
    return nc.layer_norm(nc.add(g, f), params[pre + "ln2_gain"], params[pre + "ln2_bias"])


def vanilla_attention(C: Tensor, cand: Tensor, mask: np.ndarray, d: int, literal_mean: bool = True):
    """Attend from each candidate over a channel's final check-in vectors.

    C: (B, n, d); cand: (B, C, d); mask: (B, n). Returns h (B, C, d) and the
    weights (B, C, n). With ``literal_mean`` the weighted sum is also divided
    by the number of real check-ins.
    """
    s = nc.scale(nc.matmul(cand, nc.transpose(C)), 1.0 / math.sqrt(d))
    alpha = nc.softmax(s, mask[:, None, :])
    h = nc.matmul(alpha, C)
    if literal_mean:
        n_eff = mask.sum(axis=-1).astype(np.float64)
        h = nc.scale(h, (1.0 / n_eff)[:, None, None])
    return h, alpha


def candidate_repr(params: ModelParams, users: np.ndarray, cands: np.ndarray, next_position: np.ndarray | None):
    """Candidate representations (B, C, d) at elapsed time 0.

    Returns (short-term form, long-term form); the short-term form carries
    the position encoding of ``next_position`` and is None when that is None.
    """
    B, Cn = cands.shape
    u = np.broadcast_to(params.user_table[users][:, None, :], (B, Cn, params.cfg.d))
    base = nc.add_n(
        [
            _project(u, params["W_u"]),
            _project(nc.gather(params["poi_table"], cands), params["W_v"]),
            _project(params.loc_table[cands], params["W_l"]),
            _project(nc.gather(params["time_table"], np.zeros_like(cands)), params["W_t"]),
        ]
    )
    long_form = nc.sigmoid(base)
    if next_position is None:
        return None, long_form
    pe = np.broadcast_to(position_encoding(next_position, params.cfg.d)[:, None, :], (B, Cn, params.cfg.d))
    return nc.sigmoid(nc.add(base, _project(pe, params["W_p"]))), long_form


@dataclass
class Activations:
    stc_self: list = field(default_factory=list)  # per layer (B, H, n, n)
    ltsc_self: list = field(default_factory=list)
    stc_vanilla: np.ndarray | None = None  # (B, C, n)
    ltsc_vanilla: np.ndarray | None = None


def score_batch(params: ModelParams, batch: Batch, cands: np.ndarray, acts: Activations | None = None) -> Tensor:
    """Scores (B, C) for candidate POI indices ``cands`` (B, C)."""
    cfg = params.cfg
    cands = np.asarray(cands, dtype=np.int64)
    if cands.ndim != 2 or cands.shape[0] != batch.size:
        raise ValueError(f"candidates must be (batch, n), got {cands.shape}")
    if cands.size and (cands.min() < 0 or cands.max() >= params.n_pois):
        raise IndexError("unknown candidate POI index")
    cv_s, cv_l = candidate_repr(params, batch.users, cands, batch.next_position if cfg.uses_stc else None)
    terms = []
    if cfg.uses_stc:
        users = np.broadcast_to(batch.users[:, None], batch.stc_pois.shape)
        C = embed_checkins(params, users, batch.stc_pois, batch.stc_buckets, batch.stc_positions)
        for k in range(1, cfg.layers + 1):
            C = attention_block(params, C, batch.stc_mask, "s", k, None if acts is None else acts.stc_self)
        h, a = vanilla_attention(C, cv_s, batch.stc_mask, cfg.d, cfg.literal_mean)
        terms.append(nc.sum_last(nc.mul(h, cv_s)))
        if acts is not None:
            acts.stc_vanilla = a.data
    if cfg.uses_ltsc:
        C = embed_checkins(params, batch.ltsc_users, batch.ltsc_pois, batch.ltsc_buckets)
        for k in range(1, cfg.layers + 1):
            C = attention_block(params, C, batch.ltsc_mask, "l", k, None if acts is None else acts.ltsc_self)
        h, a = vanilla_attention(C, cv_l, batch.ltsc_mask, cfg.d, cfg.literal_mean)
        terms.append(nc.sum_last(nc.mul(h, cv_l)))
        if acts is not None:
            acts.ltsc_vanilla = a.data
    u = Tensor(params.user_table[batch.users][:, :, None])
    uv = nc.reshape(nc.matmul(nc.gather(params["poi_table"], cands), u), cands.shape)
    terms.append(uv)
    return nc.add_n(terms)


def score_instances(params: ModelParams, instances: list[TrainingInstance], cands: np.ndarray) -> np.ndarray:
    """Inference helper: plain numpy scores, no tape."""
    return score_batch(params, make_batch(instances, params.cfg), cands).data


# --------------------------------------------------------------------- trace


@dataclass
class AttentionTrace:
    candidate: int
    score: float
    user: int
    stc: list[dict]  # per position {"time", "poi"}
    stc_self: list[list[list[list[float]]]]  # [layer][head] n x n
    stc_vanilla: list[float]
    ltsc: list[dict]  # per position {"time", "poi", "user"}
    ltsc_vanilla: list[float]
    by_owner: dict[str, list[float]]
    friend_means: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AttentionTrace":
        return cls(**json.loads(text))


def forward(instance: TrainingInstance, candidate: int, params: ModelParams, trace: bool = False):
    """Score one candidate for one instance; optionally return its attention trace."""
    batch = make_batch([instance], params.cfg)
    acts = Activations() if trace else None
    s = float(score_batch(params, batch, np.array([[candidate]]), acts).data[0, 0])
    if not trace:
        return s, None
    return s, build_trace(instance, candidate, s, batch, acts, params.cfg)


def build_trace(instance, candidate, score, batch: Batch, acts: Activations, cfg: ModelConfig, b: int = 0, c: int = 0) -> AttentionTrace:
    n_s = int(batch.stc_mask[b].sum())
    n_l = int(batch.ltsc_mask[b].sum()) if cfg.uses_ltsc else 0
    stc = [{"time": int(t), "poi": int(p)} for t, p in zip(batch.stc_times[b, :n_s], batch.stc_pois[b, :n_s])] if cfg.uses_stc else []
    stc_self = [A[b, :, :n_s, :n_s].tolist() for A in acts.stc_self]
    ltsc = [
        {"time": int(t), "poi": int(p), "user": int(u)}
        for t, p, u in zip(batch.ltsc_times[b, :n_l], batch.ltsc_pois[b, :n_l], batch.ltsc_users[b, :n_l])
    ]
    lv = acts.ltsc_vanilla[b, c, :n_l].tolist() if acts.ltsc_vanilla is not None else []
    by_owner: dict[str, list[float]] = {}
    for row, w in zip(ltsc, lv):
        by_owner.setdefault(str(row["user"]), []).append(w)
    friend_means = {o: float(np.mean(ws)) for o, ws in by_owner.items() if int(o) != instance.user}
    return AttentionTrace(
        candidate=int(candidate),
        score=float(score),
        user=int(instance.user),
        stc=stc,
        stc_self=stc_self,
        stc_vanilla=acts.stc_vanilla[b, c, :n_s].tolist() if acts.stc_vanilla is not None else [],
        ltsc=ltsc,
        ltsc_vanilla=lv,
        by_owner=by_owner,
        friend_means=friend_means,
    )


def export_trace(trace: AttentionTrace) -> str:
    return trace.to_json()
