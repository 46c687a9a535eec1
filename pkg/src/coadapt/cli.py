"""Command-line entry point: ``coadapt <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import MODES
from .encoder import encode
from .episodes import (
    SPLITS,
    check_disjoint,
    generate_blobs,
    generate_distractor,
    load_dataset,
    sample_episode,
    save_dataset,
    split_classes,
)
from .trainer import (
    ABLATION_MODES,
    TrainConfig,
    ablation_sweep,
    episode_rng,
    evaluate,
    forward,
    load_checkpoint,
    save_checkpoint,
    sweep_table,
    train,
)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(command: str, config: dict, seeds: dict, inputs: list, outputs: list) -> dict:
    return {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": {str(p): _sha256(Path(p)) for p in outputs if Path(p).is_file()},
        "version": __version__,
    }


def _load_split(path: str, tag: str):
    p = Path(path)
    return load_dataset(p / f"{tag}.fsd", tag) if p.is_dir() else load_dataset(p)


# --------------------------------------------------------------------- commands


def cmd_gen_data(args) -> dict:
    if args.kind == "blobs":
        ds = generate_blobs(args.classes, args.dim, args.per_class, args.sigma, args.seed)
    else:
        ds = generate_distractor(args.classes, args.signal_dim, args.distractor_dim, args.per_class,
                                 args.sigma_signal, args.sigma_distractor, args.seed)
    if args.precision == 32:
        ds = type(ds)(ds.features.astype(np.float32), ds.labels)
    splits = split_classes(ds, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for split in splits:
        path = out / f"{split.split_tag}.fsd"
        save_dataset(split, path)
        paths.append(path)
    summary = {
        "kind": args.kind,
        "feature_dim": int(ds.item_shape[0]),
        "splits": {s.split_tag: {"classes": len(s.class_index), "items": len(s)} for s in splits},
    }
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")}
    _write_json(out / "manifest.json", {**_manifest("gen-data", config, {"seed": args.seed}, [], paths),
                                        "summary": summary})
    return summary


_INLINE = {
    "way": "way", "shot": "shot", "query": "query", "epochs": "epochs", "tasks_per_epoch": "tasks_per_epoch",
    "lr": "learning_rate", "mode": "mode", "distance": "distance", "seed": "seed", "encoder": "encoder_kind",
    "hidden": "hidden", "dim": "embedding_dim", "precision": "precision", "val_episodes": "val_episodes",
    "query_aggregation": "query_aggregation",
}


def _config_from_args(args) -> TrainConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
        base.pop("data", None)
    if args.paper_scale:
        shot = args.shot if args.shot is not None else base.get("shot", 1)
        base.update(epochs=300 if shot == 1 else 200, tasks_per_epoch=200)
    for flag, key in _INLINE.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    return TrainConfig.from_dict(base)


def cmd_train(args) -> dict:
    config = _config_from_args(args)
    train_ds = _load_split(args.data, "train")
    val_ds = _load_split(args.data, "val") if Path(args.data).is_dir() else None
    if val_ds is not None:
        check_disjoint(train_ds, val_ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = train(config, train_ds, val_ds, metrics_path=out / "metrics.jsonl")
    save_checkpoint(ckpt, out / "model.cadw")
    _write_json(out / "manifest.json", _manifest(
        "train", config.to_dict(), {"seed": config.seed, "val_seed": config.val_seed}, [args.data],
        [out / "model.cadw", out / "metrics.jsonl"]))
    last = ckpt.history[-1] if ckpt.history else {}
    return {"checkpoint": str(out / "model.cadw"), "tasks": config.total_tasks, "best_epoch": ckpt.best_epoch,
            "final_train_loss": last.get("train_loss"), "val_accuracy": last.get("val_accuracy")}


def cmd_eval(args) -> dict:
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_split(args.data, "test")
    report = evaluate(ckpt, ds, args.way, args.shot, args.query, args.episodes, args.seed)
    payload = report.to_dict()
    if args.out:
        out = Path(args.out)
        _write_json(out, report.to_dict(include_accuracies=True))
        _write_json(out.with_suffix(".manifest.json"), _manifest(
            "eval", {"way": args.way, "shot": args.shot, "query": args.query, "episodes": args.episodes},
            {"seed": args.seed}, [args.ckpt, args.data], [out]))
    return payload


def cmd_ablate(args) -> dict:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    data = args.data or raw.pop("data", None)
    raw.pop("data", None)
    if data is None:
        raise ValueError("ablate needs --data or a 'data' entry in the config")
    config = TrainConfig.from_dict(raw)
    if args.shot is not None:
        config = replace(config, shot=args.shot)
    modes = ABLATION_MODES if args.modes == "all" else tuple(m.strip() for m in args.modes.split(","))
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ValueError(f"unknown modes {bad}; expected a subset of {MODES}")
    train_ds, val_ds, test_ds = (_load_split(data, tag) for tag in SPLITS)
    check_disjoint(train_ds, val_ds, test_ds)
    reports = ablation_sweep(config, train_ds, val_ds, test_ds, modes, args.episodes, args.seed)
    table = sweep_table(reports, config)
    table["eval_seed"] = args.seed
    if args.out:
        out = Path(args.out)
        _write_json(out, table)
        _write_json(out.with_suffix(".manifest.json"), _manifest(
            "ablate", config.to_dict(), {"seed": config.seed, "eval_seed": args.seed}, [data], [out]))
    return table


def _tolist(t):
    return None if t is None else np.asarray(t.data).tolist()


def cmd_inspect(args) -> dict:
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_split(args.data, "test")
    cfg = ckpt.config
    ep = sample_episode(ds, args.way, args.shot, args.query, episode_rng(args.episode_seed, 0))
    dist, res = forward(ckpt.model(), ep, cfg.mode, cfg.distance, cfg.query_aggregation)
    classes = []
    for i, cid in enumerate(ep.classes):
        entry = {"position": i, "class_id": cid}
        if res.scores_support is not None and cfg.mode != "self_only":
            entry["support_scores"] = _tolist(res.scores_support)[i]
            entry["support_pooled"] = _tolist(res.pooled_support)[i]
            entry["support_prototype_norm"] = float(np.linalg.norm(res.proto_support.data[i]))
        if res.scores_query is not None and cfg.mode != "self_only":
            entry["query_scores"] = _tolist(res.scores_query)[i]
        classes.append(entry)
    payload = {
        "mode": cfg.mode,
        "way": args.way, "shot": args.shot, "query": args.query, "episode_seed": args.episode_seed,
        "query_labels": ep.query_labels.tolist(),
        "classes": classes,
        "query_pooled": _tolist(res.pooled_query),
        "query_prototype_norm": None if res.proto_query is None else float(np.linalg.norm(res.proto_query.data)),
        "predictions": np.argmax(dist.logits.data, axis=-1).tolist(),
    }
    if cfg.mode == "self_only":
        payload["self_support_scores"] = _tolist(res.scores_support)
        payload["self_query_scores"] = _tolist(res.scores_query)
    if args.out:
        _write_json(Path(args.out), payload)
    return payload


def cmd_export_emb(args) -> dict:
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_split(args.data, "test")
    cfg = ckpt.config
    model = ckpt.model()
    m = cfg.embedding_dim
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "role", "label", *[f"e{j}" for j in range(m)]])
        for e in range(args.episodes):
            ep = sample_episode(ds, args.way, args.shot, args.query, episode_rng(args.episode_seed, e))
            if args.adapted:
                _, res = forward(model, ep, cfg.mode, cfg.distance, cfg.query_aggregation)
                zs, zq = res.z_s_adapted.data, res.z_q_adapted.data
            else:
                n, k = ep.support.shape[:2]
                zs = encode(model.encoder, ep.support.reshape(n * k, *ep.support.shape[2:])).data.reshape(n, k, m)
                zq = encode(model.encoder, ep.query).data
            if zq.ndim == 3:
                raise ValueError("per-class adapted queries have no single embedding to export")
            for i, cid in enumerate(ep.classes):
                for j in range(args.shot):
                    writer.writerow([e, "support", cid, *zs[i, j].tolist()])
            for t, pos in enumerate(ep.query_labels):
                writer.writerow([e, "query", ep.classes[pos], *zq[t].tolist()])
            rows += zs.shape[0] * zs.shape[1] + zq.shape[0]
    return {"rows": rows, "adapted": args.adapted, "out": str(out)}


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coadapt", description="Few-shot classification with co-adapted embeddings")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic train/val/test FSD1 files")
    g.add_argument("--kind", choices=("blobs", "distractor"), default="blobs")
    g.add_argument("--classes", type=int, default=100)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--signal-dim", type=int, default=4)
    g.add_argument("--distractor-dim", type=int, default=28)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--sigma-signal", type=float, default=0.2)
    g.add_argument("--sigma-distractor", type=float, default=1.0)
    g.add_argument("--precision", type=int, choices=(32, 64), default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="episodic meta-training")
    t.add_argument("--data", required=True, help="directory with train.fsd/val.fsd, or a single dataset file")
    t.add_argument("--config", help="JSON file mirroring TrainConfig")
    t.add_argument("--paper-scale", action="store_true", help="300 (1-shot) or 200 epochs of 200 tasks")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--way", type=int)
    t.add_argument("--shot", type=int)
    t.add_argument("--query", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--tasks-per-epoch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--distance", choices=("squared_euclidean", "euclidean"))
    t.add_argument("--seed", type=int)
    t.add_argument("--encoder", choices=("mlp", "conv"))
    t.add_argument("--hidden", type=lambda s: [int(x) for x in s.split(",") if x])
    t.add_argument("--dim", type=int, help="embedding dimension m")
    t.add_argument("--precision", type=int, choices=(32, 64))
    t.add_argument("--val-episodes", type=int)
    t.add_argument("--query-aggregation", choices=("mean", "per_class"))
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy with 95%% interval over test episodes")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--way", type=int, default=5)
    e.add_argument("--shot", type=int, choices=(1, 5), default=1)
    e.add_argument("--query", type=int, default=15)
    e.add_argument("--episodes", type=int, default=2000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every adaptation mode on identical episodes")
    a.add_argument("--config", help="JSON TrainConfig, optionally with a 'data' directory")
    a.add_argument("--data")
    a.add_argument("--modes", default="all", help="'all' or a comma-separated list")
    a.add_argument("--shot", type=int)
    a.add_argument("--episodes", type=int, default=2000)
    a.add_argument("--seed", type=int, default=0, help="evaluation episode seed")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="dump attention scores for one episode")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--way", type=int, default=5)
    i.add_argument("--shot", type=int, default=5)
    i.add_argument("--query", type=int, default=15)
    i.add_argument("--episode-seed", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)

    x = sub.add_parser("export-emb", help="CSV of episode embeddings before or after adaptation")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--adapted", type=_bool, default=True)
    x.add_argument("--way", type=int, default=5)
    x.add_argument("--shot", type=int, default=5)
    x.add_argument("--query", type=int, default=15)
    x.add_argument("--episodes", type=int, default=1)
    x.add_argument("--episode-seed", type=int, default=0)
    x.set_defaults(func=cmd_export_emb)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
