"""Command-line entry point: preprocess, embed, train, evaluate, trace.

Every command reads the same JSON run config (``--config``) with
``--set section.key=value`` overrides and writes its artifacts under the
workspace directory. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("dansnr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATASET_FILE = "dataset.json"
SUMMARY_JSON = "dataset_summary.json"
SUMMARY_TXT = "dataset_summary.txt"
SKIPS_FILE = "skipped_lines.txt"
L2L_FILE = "l2l_graph.tsv"
USER_EMB = "user_embedding.json"
LOC_EMB = "location_embedding.json"
CKPT_FILE = "model.ckpt"
LOSS_FILE = "train_loss.csv"
REPORT_JSON = "eval_report.json"
REPORT_TXT = "eval_report.txt"
RANKINGS_FILE = "eval_rankings.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _summary_table(s: dict) -> str:
    rows = [
        ("#users", s["users"]),
        ("#POIs", s["pois"]),
        ("#check-ins", s["checkins"]),
        ("#friendships", s["friendships"]),
        ("#trajectories", s["trajectories"]),
        ("#train trajectories", s["train_trajectories"]),
        ("#test trajectories", s["test_trajectories"]),
    ]
    return "".join(f"{k:<22}{v:>10}\n" for k, v in rows)


def _load_dataset(cfg):
    from .ingest import Dataset

    path = cfg.workspace / DATASET_FILE
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run 'preprocess' first")
    return Dataset.from_json(path.read_text(encoding="utf-8"))


def _load_tables(cfg, ds):
    from .graphembed import EmbeddingTable

    out = []
    for name, count in ((USER_EMB, ds.n_users), (LOC_EMB, ds.n_pois)):
        path = cfg.workspace / name
        if not path.is_file():
            raise FileNotFoundError(f"{path} not found; run 'embed' first")
        table = EmbeddingTable.from_json(path.read_text(encoding="utf-8"))
        if table.dim != cfg.model.d:
            raise UsageError(f"{name} has dim {table.dim} but model.d is {cfg.model.d}; re-run 'embed'")
        out.append(table.matrix_for(list(range(count))))
    return out


def _l2l(ds, cfg):
    from .geo import build_l2l_graph

    return build_l2l_graph(list(enumerate(ds.poi_coords)), k=cfg.filter.l2l_k)


# ------------------------------------------------------------------ commands


def cmd_preprocess(cfg) -> int:
    from .ingest import load_dataset

    cfg.check_inputs()
    f = cfg.filter
    ds, ck_report, edge_report = load_dataset(
        cfg.paths.checkins,
        cfg.paths.edges,
        min_user=f.min_user,
        min_poi=f.min_poi,
        min_traj=f.min_traj,
        threshold=int(round(f.gap_hours * 3600)),
        ratio=f.ratio,
        cell_size_deg=f.cell_size_deg,
    )
    ws = cfg.workspace
    _write(ws / DATASET_FILE, ds.to_json())
    summary = ds.summary()
    _write(ws / SUMMARY_JSON, json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _write(ws / SUMMARY_TXT, _summary_table(summary))
    _write(ws / SKIPS_FILE, "[check-ins]\n" + ck_report.render() + "[edges]\n" + edge_report.render())
    _write(ws / L2L_FILE, _l2l(ds, cfg).to_edgelist())
    print(_summary_table(summary), end="")
    return EXIT_OK


def cmd_embed(cfg) -> int:
    from .graphembed import embed_graph, friend_adjacency, proximity_adjacency

    ds = _load_dataset(cfg)
    sg = cfg.skipgram
    kw = dict(dim=cfg.model.d, window=sg.window, negatives=sg.negatives, epochs=sg.epochs, lr=sg.lr)
    users = embed_graph(friend_adjacency(ds.n_users, ds.friend_edges), list(range(ds.n_users)), cfg.user_walk_cfg, **kw)
    locs = embed_graph(proximity_adjacency(_l2l(ds, cfg).adjacency), list(range(ds.n_pois)), cfg.location_walk_cfg, **kw)
    _write(cfg.workspace / USER_EMB, users.to_json())
    _write(cfg.workspace / LOC_EMB, locs.to_json())
    print(f"embedded {len(users)} users and {len(locs)} locations at dim {cfg.model.d}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    from .instances import NegativeSampler, build_instances
    from .model import init_params
    from .train import TrainingDiverged, train

    ds = _load_dataset(cfg)
    user_table, loc_table = _load_tables(cfg, ds)
    tc = cfg.train_cfg
    sampler = NegativeSampler(ds, n=tc.negatives, exponent=tc.popularity_exponent, seed=cfg.seed)
    instances = build_instances(ds, sampler, cfg.model.stc_len, cfg.model.ltsc_len)
    if not instances:
        raise ValueError("no training instances: every train trajectory has a single check-in")
    params = init_params(cfg.model, ds.n_pois, user_table, loc_table, seed=cfg.seed)
    refs = {"user_table": USER_EMB, "loc_table": LOC_EMB}
    ws = cfg.workspace

    def on_checkpoint(step, p):
        p.save(ws / f"model_step{step:07d}.ckpt", refs)

    calls = itertools.count(1)

    def resample(inst):
        # fresh, still deterministic, key per redraw
        return sampler.sample(inst.positive, inst.iid + len(instances) * next(calls))

    try:
        result = train(instances, params, tc, on_checkpoint=on_checkpoint, resample=resample)
    except TrainingDiverged as e:
        if e.last_good is not None:
            e.last_good.save(ws / "model_last_good.ckpt", refs)
        raise
    result.params.save(ws / CKPT_FILE, refs)
    _write(ws / LOSS_FILE, result.loss_csv())
    if result.history:
        print(f"trained {len(result.history)} steps on {len(instances)} instances; final loss {result.history[-1][2]:.6f}")
    else:
        print(f"max_iters=0: saved the initialization ({len(instances)} instances)")
    return EXIT_OK


def _test_instances(cfg, ds, negatives: int):
    from .instances import NegativeSampler, build_test_instances

    sampler = None
    if negatives:
        sampler = NegativeSampler(ds, n=negatives, exponent=cfg.train.popularity_exponent, seed=cfg.seed + 1)
    return build_test_instances(ds, sampler, cfg.model.stc_len, cfg.model.ltsc_len)


def _load_params(cfg, checkpoint):
    from .model import ModelParams

    path = Path(checkpoint) if checkpoint else cfg.workspace / CKPT_FILE
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found; run 'train' first")
    return ModelParams.load(path)


def cmd_evaluate(cfg, checkpoint=None) -> int:
    from .evaluation import evaluate, model_scorer, popularity_baseline, rank_all, rankings_csv

    ds = _load_dataset(cfg)
    params = _load_params(cfg, checkpoint)
    insts = _test_instances(cfg, ds, cfg.eval.negatives)
    if not insts:
        raise ValueError("no test instances")
    ec = cfg.eval
    echo = {"model": json.loads(json.dumps(params.cfg.__dict__)), "negatives": ec.negatives, "seed": cfg.seed}
    report = evaluate(model_scorer(params), insts, ec.k, ec.policy, ds.n_pois, ec.batch_size, echo)
    base = evaluate(popularity_baseline(ds.poi_popularity), insts, ec.k, ec.policy, ds.n_pois, ec.batch_size)
    report.baseline = {
        "name": "popularity",
        "recall": {str(k): v for k, v in base.recall.items()},
        "ndcg": {str(k): v for k, v in base.ndcg.items()},
    }
    results, _ = rank_all(model_scorer(params), insts, ec.policy, ds.n_pois, ec.batch_size)
    ws = cfg.workspace
    _write(ws / REPORT_JSON, report.to_json())
    _write(ws / REPORT_TXT, report.to_table())
    _write(ws / RANKINGS_FILE, rankings_csv(results))
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_trace(cfg, checkpoint=None, instance: int = 0, candidate: int | None = None) -> int:
    from .model import forward

    ds = _load_dataset(cfg)
    params = _load_params(cfg, checkpoint)
    insts = _test_instances(cfg, ds, 0)
    if not 0 <= instance < len(insts):
        raise UsageError(f"instance {instance} out of range: {len(insts)} test instances")
    inst = insts[instance]
    cand = inst.positive if candidate is None else candidate
    if not 0 <= cand < ds.n_pois:
        raise UsageError(f"candidate {cand} out of range: {ds.n_pois} POIs")
    _, trace = forward(inst, cand, params, trace=True)
    out = cfg.workspace / f"trace_instance{instance}_poi{cand}.json"
    _write(out, trace.to_json())
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. model.d=32")
    common.add_argument("--checkins", help="check-in file (overrides paths.checkins)")
    common.add_argument("--edges", help="friendship file (overrides paths.edges)")
    common.add_argument("--workspace", help="artifact directory (overrides paths.workspace)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("--threads", type=int, help="cap on numeric worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dansnr", description="Social-aware next-POI recommendation pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("preprocess", parents=[common], help="filter, split and index the raw files")
    sub.add_parser("embed", parents=[common], help="node2vec user and location tables")
    sub.add_parser("train", parents=[common], help="train the model, write checkpoint and loss CSV")
    ev = sub.add_parser("evaluate", parents=[common], help="Recall@k / NDCG@k on test trajectories")
    ev.add_argument("--checkpoint")
    tr = sub.add_parser("trace", parents=[common], help="export attention weights for one test instance")
    tr.add_argument("--checkpoint")
    tr.add_argument("--instance", type=int, default=0, help="test instance index")
    tr.add_argument("--candidate", type=int, help="candidate POI index (default: the true POI)")
    return p


def _limit_threads(n: int) -> None:
    # only effective before numpy loads its BLAS, hence the lazy imports above
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("dansnr: error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        _limit_threads(args.threads)

    from .config import ConfigError, load_config
    from .ingest import DataError

    overrides = list(args.set)
    for flag, key in (("checkins", "paths.checkins"), ("edges", "paths.edges"), ("workspace", "paths.workspace")):
        if getattr(args, flag):
            overrides.append(f"{key}={getattr(args, flag)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "embed":
            return cmd_embed(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        return cmd_trace(cfg, args.checkpoint, args.instance, args.candidate)
    except (ConfigError, UsageError) as e:
        print(f"dansnr: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"dansnr: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, IndexError, KeyError) as e:
        print(f"dansnr: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
