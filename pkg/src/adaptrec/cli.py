"""Command-line entry point.

Every command resolves one configuration document (flags > config file >
defaults), creates a timestamped run directory, echoes the resolved config
there, and writes logs, metrics and outputs under it.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .evaluate import EvalProtocol, MfConfig, ProtocolError, evaluate_hr, summarize
from .experiments import ABLATION_VARIANTS, ALL_VARIANTS, FamilyConfig, RunSettings, run_grid, synthetic_family
from .graph import (
    GraphError,
    load_edge_list,
    read_manifest,
    sparsify_train,
    split_dataset,
    write_edge_list,
    write_manifest,
)
from .model import Checkpoint, LgnnScorer, ModelConfig, SubgraphSampler, load_checkpoint, save_checkpoint
from .props import compute_properties, dumps_norm, dumps_properties, fit_norm, normalize
from .subgraph import RwrConfig
from .synth import SynthConfig, gen_synthetic
from .train import FinetuneConfig, PretrainConfig, finetune, pretrain

log = logging.getLogger("adaptrec")

ENV_RUN_DIR = "ADAPT_RUN_DIR"
ENV_THREADS = "ADAPT_THREADS"

SECTIONS: dict[str, type] = {
    "synth": SynthConfig,
    "family": FamilyConfig,
    "model": ModelConfig,
    "rwr": RwrConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "eval": EvalProtocol,
    "mf": MfConfig,
}
EXTRA_DEFAULTS = {
    "split": {"val_frac": 0.05, "test_frac": 0.05, "keep_frac": 1.0, "seed": 0},
    "run": {"root": "runs", "threads": None},
}


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


# ---------------------------------------------------------------- config


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def default_config() -> dict:
    cfg = {name: _plain(asdict(cls())) for name, cls in SECTIONS.items() if name != "synth"}
    cfg["synth"] = _plain(asdict(SynthConfig(100, 100, 0.05)))
    for name, section in EXTRA_DEFAULTS.items():
        cfg[name] = dict(section)
    return cfg


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge; keys absent from ``base`` are rejected."""
    out = dict(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    section, _, key = dotted.partition(".")
    merge(cfg, {section: {key: value}})  # validates the key
    cfg[section][key] = value


def build(cls, values: dict):
    """Instantiate a config dataclass, turning YAML lists back into tuples."""
    kwargs = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInputError(str(path))
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, doc)
    if os.environ.get(ENV_RUN_DIR):
        cfg["run"]["root"] = os.environ[ENV_RUN_DIR]
    if os.environ.get(ENV_THREADS):
        cfg["run"]["threads"] = int(os.environ[ENV_THREADS])
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        set_dotted(cfg, key.strip(), yaml.safe_load(raw))
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            set_dotted(cfg, dest, list(value) if isinstance(value, tuple) else value)
    # build everything once so errors surface before any computation
    for name, cls in SECTIONS.items():
        if name != "synth" or args.command == "synth":
            build(cls, cfg[name])
    return cfg


# ---------------------------------------------------------------- run directory


def make_run_dir(root: str | Path, command: str) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for n in range(1000):
        path = root / (f"{stamp}-{command}" if n == 0 else f"{stamp}-{command}-{n}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not create a run directory under {root}")


def write_metrics(path: Path, rows: list[dict]) -> None:
    """Tab-delimited metrics log with a header row; floats use repr for exactness."""
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(_fmt(r.get(k)) for k in keys))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_kv(path: Path, values: dict) -> None:
    path.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in values.items()), encoding="utf-8")


def _require(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(str(p))
    return p


def _graph_files(paths: list[str]) -> list[Path]:
    out: list[Path] = []
    for raw in paths:
        p = _require(raw)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.is_file() and not q.name.startswith(".")))
        else:
            out.append(p)
    if not out:
        raise ConfigError(f"no graph files found in {paths}")
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: dict, run_dir: Path) -> int:
    if args.family:
        fam = build(FamilyConfig, cfg["family"])
        corpus, target = synthetic_family(fam)
        out = Path(args.out) if args.out else run_dir / "family"
        (out / "corpus").mkdir(parents=True, exist_ok=True)
        for m, g in enumerate(corpus):
            write_edge_list(g, out / "corpus" / f"graph_{m:03d}.tsv")
        write_edge_list(target, out / "target.tsv")
        print(f"wrote {len(corpus)} corpus graphs and a target to {out}")
        return 0
    sc = build(SynthConfig, cfg["synth"])
    g = gen_synthetic(sc)
    out = Path(args.out) if args.out else run_dir / "graph.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_edge_list(g, out)
    print(f"wrote {g.user_count} users, {g.item_count} items, {g.edge_count} edges to {out}")
    return 0


def cmd_props(args, cfg: dict, run_dir: Path) -> int:
    files = _graph_files(args.graphs)
    vectors = []
    for path in files:
        pv = compute_properties(load_edge_list(path))
        vectors.append(pv)
        if len(files) > 1:
            print(f"# {path}")
        print(dumps_properties(pv), end="")
    (run_dir / "properties.txt").write_text(
        "".join(f"# {p}\n{dumps_properties(v)}" for p, v in zip(files, vectors)), encoding="utf-8"
    )
    if args.norm_out or len(files) > 1:
        norm_path = Path(args.norm_out) if args.norm_out else run_dir / "norm.txt"
        norm_path.parent.mkdir(parents=True, exist_ok=True)
        norm_path.write_text(dumps_norm(fit_norm(vectors)), encoding="utf-8")
        print(f"# normalization stats over {len(files)} graphs written to {norm_path}")
    return 0


def cmd_prepare(args, cfg: dict, run_dir: Path) -> int:
    g = load_edge_list(_require(args.input))
    s = cfg["split"]
    split = split_dataset(g, s["val_frac"], s["test_frac"], s["seed"])
    if s["keep_frac"] < 1.0:
        split = sparsify_train(split, s["keep_frac"], s["seed"])
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    meta = {"val_frac": s["val_frac"], "test_frac": s["test_frac"], "keep_frac": s["keep_frac"]}
    write_manifest(split, out / "manifest.tsv", meta)
    sizes = split.sizes()
    summary = {"users": g.user_count, "items": g.item_count, "edges": g.edge_count, **sizes}
    write_kv(run_dir / "summary.txt", summary)
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    print(f"manifest: {out / 'manifest.tsv'}")
    return 0


def cmd_pretrain(args, cfg: dict, run_dir: Path) -> int:
    files = _graph_files(args.corpus)
    graphs = [load_edge_list(p) for p in files]
    pcfg = build(PretrainConfig, cfg["pretrain"])
    rows: list[dict] = []

    def on_epoch(row):
        rows.append(row)
        log.info("epoch %d loss %.6f heldout %.6f", row["epoch"], row["loss"], row["heldout_loss"])

    res = pretrain(graphs, pcfg, build(ModelConfig, cfg["model"]), build(RwrConfig, cfg["rwr"]), on_epoch)
    res.checkpoint.extra["corpus"] = [p.name for p in files]
    out = Path(args.out) if args.out else run_dir / "checkpoint.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.checkpoint, out)
    write_metrics(run_dir / "metrics.tsv", res.history)
    best = min((r["heldout_loss"] for r in res.history if not math.isnan(r["heldout_loss"])), default=math.nan)
    print(f"pre-trained on {len(graphs)} graphs, {len(res.history) - 1} epochs, best held-out loss {best:.6f}")
    print(f"checkpoint: {out}")
    return 0


def cmd_finetune(args, cfg: dict, run_dir: Path) -> int:
    split = read_manifest(_require(args.manifest))
    ck = load_checkpoint(_require(args.checkpoint)) if args.checkpoint else None
    if ck is None and args.strategy != "scratch":
        raise ConfigError(f"--strategy {args.strategy} needs --checkpoint")
    fcfg = build(FinetuneConfig, cfg["finetune"])
    prot = build(EvalProtocol, cfg["eval"])
    mcfg = ck.model if ck else build(ModelConfig, cfg["model"])
    rwr = ck.rwr if ck else build(RwrConfig, cfg["rwr"])
    sampler = SubgraphSampler(split.train_graph(), rwr, fcfg.seed, mcfg.l_max)
    res = finetune(ck, split, args.strategy, fcfg, prot, mcfg, rwr, sampler,
                   on_epoch=lambda r: log.info("epoch %d loss %.6f val_hr %.4f", r["epoch"], r["loss"], r["val_hr"]))
    test = evaluate_hr(res.scorer(sampler, mcfg), split, prot, fcfg.eval_seed)
    extra = {
        "mode": res.mode,
        "p_norm": None if res.p_norm is None else [float(x) for x in res.p_norm],
        "strategy": args.strategy,
        "best_epoch": res.best_epoch,
        "sampler_seed": fcfg.seed,
    }
    out = Path(args.out) if args.out else run_dir / "model.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint(res.params, mcfg, ck.norm if ck else None, rwr, extra), out)
    write_metrics(run_dir / "metrics.tsv", res.history)
    result = {"strategy": args.strategy, "best_epoch": res.best_epoch, "best_val_hr": res.best_val_hr,
              "test_hr": test.hr, "test_hits": test.hits, "test_evaluated": test.evaluated,
              "test_skipped": test.skipped}
    write_kv(run_dir / "result.txt", result)
    print(" ".join(f"{k}={_fmt(v)}" for k, v in result.items()))
    print(f"model: {out}")
    return 0


def cmd_eval(args, cfg: dict, run_dir: Path) -> int:
    split = read_manifest(_require(args.manifest))
    ck = load_checkpoint(_require(args.checkpoint))
    prot = build(EvalProtocol, cfg["eval"])
    sampler = SubgraphSampler(split.train_graph(), ck.rwr, int(ck.extra.get("sampler_seed", 0)), ck.model.l_max)
    mode = args.mode
    p_norm = ck.extra.get("p_norm")
    if mode == "auto":
        mode = ck.extra.get("mode") or ("adapted" if ck.norm is not None else "meta")
    if mode == "adapted" and p_norm is None:
        if ck.norm is None:
            raise ConfigError("adapted mode needs normalization stats in the checkpoint")
        p_norm = normalize(compute_properties(split.train_graph()), ck.norm)
    scorer = LgnnScorer(sampler, ck.params, ck.model, mode, None if p_norm is None else np.asarray(p_norm))
    seeds = [args.eval_seed] if args.eval_seed is not None else list(prot.seeds)
    rows, values = [], []
    for seed in seeds:
        r = evaluate_hr(scorer, split, prot, seed, args.partition)
        rows.append({"seed": seed, "hr": r.hr, "hits": r.hits, "evaluated": r.evaluated, "skipped": r.skipped})
        values.append(r.hr)
    write_metrics(run_dir / "report.tsv", rows)
    s = summarize(values)
    write_kv(run_dir / "summary.txt", {"mode": mode, "partition": args.partition, "mean": s.mean, "std": s.std})
    for r in rows:
        print(f"seed={r['seed']} hr={r['hr']:.4f} ({r['hits']}/{r['evaluated']}, skipped {r['skipped']})")
    print(f"HR@{prot.k} {s.formatted()}")
    return 0


def cmd_ablation(args, cfg: dict, run_dir: Path) -> int:
    if args.target:
        target = load_edge_list(_require(args.target))
        corpus = None
    else:
        corpus, target = synthetic_family(build(FamilyConfig, cfg["family"]))
    variants = args.variants or list(ABLATION_VARIANTS)
    needs_ck = set(variants) - {"scratch", "MF"}
    ck = None
    if args.checkpoint:
        ck = load_checkpoint(_require(args.checkpoint))
    elif needs_ck:
        if args.corpus:
            corpus = [load_edge_list(p) for p in _graph_files(args.corpus)]
        if corpus is None:
            raise ConfigError("ablation with --target needs --corpus or --checkpoint")
        res = pretrain(corpus, build(PretrainConfig, cfg["pretrain"]), build(ModelConfig, cfg["model"]),
                       build(RwrConfig, cfg["rwr"]))
        ck = res.checkpoint
        save_checkpoint(ck, run_dir / "checkpoint.npz")
        write_metrics(run_dir / "pretrain_metrics.tsv", res.history)
    s = cfg["split"]
    settings = RunSettings(
        val_frac=s["val_frac"],
        test_frac=s["test_frac"],
        seeds=tuple(build(EvalProtocol, cfg["eval"]).seeds),
        finetune=build(FinetuneConfig, cfg["finetune"]),
        mf=build(MfConfig, cfg["mf"]),
        protocol=build(EvalProtocol, cfg["eval"]),
        model=build(ModelConfig, cfg["model"]),
        rwr=build(RwrConfig, cfg["rwr"]),
    )
    keeps = args.keep_fracs or [s["keep_frac"]]
    report = run_grid(ck, target, variants, keeps, settings, args.dataset,
                      on_row=lambda r: log.info("%s keep=%s seed=%d hr=%.4f", r.variant, r.keep_frac, r.seed, r.hr))
    (run_dir / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (run_dir / "summary.txt").write_text(report.to_kv(), encoding="utf-8")
    (run_dir / "table.txt").write_text(report.table(), encoding="utf-8")
    print(report.table(), end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "props": cmd_props,
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override any config value (repeatable)")
    common.add_argument("--run-dir", dest="run.root", help=f"run directory root (env {ENV_RUN_DIR})")
    common.add_argument("--threads", dest="run.threads", type=int, help=f"cap on worker threads (env {ENV_THREADS})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adaptrec", description="Localized CF pre-training and fine-tuning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic graph or a graph family")
    s.add_argument("--users", dest="synth.user_count", type=int)
    s.add_argument("--items", dest="synth.item_count", type=int)
    s.add_argument("--density", dest="synth.target_density", type=float)
    s.add_argument("--exponent", dest="synth.preferential_exponent", type=float)
    s.add_argument("--communities", dest="synth.communities", type=int)
    s.add_argument("--mixing", dest="synth.mixing", type=float)
    s.add_argument("--seed", dest="synth.seed", type=int)
    s.add_argument("--family", action="store_true", help="write a corpus plus held-out target instead")
    s.add_argument("--out", help="output file (or directory with --family)")

    s = sub.add_parser("props", parents=[common], help="structural properties; several graphs also give norm stats")
    s.add_argument("graphs", nargs="+", help="edge-list files or directories")
    s.add_argument("--norm-out", help="write normalization stats here")

    s = sub.add_parser("prepare", parents=[common], help="split and sparsify a graph into a manifest")
    s.add_argument("input")
    s.add_argument("--val-frac", dest="split.val_frac", type=float)
    s.add_argument("--test-frac", dest="split.test_frac", type=float)
    s.add_argument("--keep-frac", dest="split.keep_frac", type=float)
    s.add_argument("--seed", dest="split.seed", type=int)
    s.add_argument("--out", help="output directory for manifest.tsv")

    s = sub.add_parser("pretrain", parents=[common], help="pre-train meta model and adaptor on a corpus")
    s.add_argument("corpus", nargs="+", help="edge-list files or directories")
    s.add_argument("--epochs", dest="pretrain.max_epochs", type=int)
    s.add_argument("--batch-size", dest="pretrain.batch_size", type=int)
    s.add_argument("--lr", dest="pretrain.learning_rate", type=float)
    s.add_argument("--seed", dest="pretrain.seed", type=int)
    s.add_argument("--no-adaptor", dest="pretrain.use_adaptor", action="store_const", const=False)
    s.add_argument("--out", help="checkpoint path")

    s = sub.add_parser("finetune", parents=[common], help="fine-tune on a prepared target")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--strategy", choices=["direct", "joint", "scratch"], required=True)
    s.add_argument("--epochs", dest="finetune.max_epochs", type=int)
    s.add_argument("--batch-size", dest="finetune.batch_size", type=int)
    s.add_argument("--lr", dest="finetune.learning_rate", type=float)
    s.add_argument("--seed", dest="finetune.seed", type=int)
    s.add_argument("--out", help="model path")

    s = sub.add_parser("eval", parents=[common], help="HR@k of a model on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=["auto", "meta", "adapted", "direct"], default="auto")
    s.add_argument("--partition", choices=["test", "val"], default="test")
    s.add_argument("--eval-seed", type=int, help="single negative-sampling seed (default: all protocol seeds)")

    s = sub.add_parser("ablation", parents=[common], help="variant table over seeds")
    s.add_argument("--corpus", nargs="+", help="pre-training graphs (default: synthetic family)")
    s.add_argument("--target", help="target edge list (default: the family's held-out graph)")
    s.add_argument("--checkpoint", help="skip pre-training and use this checkpoint")
    s.add_argument("--variants", nargs="+", choices=list(ALL_VARIANTS))
    s.add_argument("--keep-fracs", nargs="+", type=float, help="sweep several keep fractions")
    s.add_argument("--dataset", default="target", help="dataset label in reports")
    return p


def _setup_logging(run_dir: Path, verbose: bool) -> list[logging.Handler]:
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(run_dir / "log.txt", encoding="utf-8")
    fh.setFormatter(fmt)
    fh.setLevel(logging.INFO)
    sh = logging.StreamHandler(sys.stderr)
    sh.setLevel(logging.INFO if verbose else logging.WARNING)
    sh.setFormatter(fmt)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    root.addHandler(fh)
    root.addHandler(sh)
    return [fh, sh]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        run_dir = make_run_dir(cfg["run"]["root"], args.command)
    except MissingInputError as exc:
        print(f"adaptrec: error: input not found: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"adaptrec: error: {exc}", file=sys.stderr)
        return 2
    echo = {"command": args.command,
            "inputs": {k: v for k, v in vars(args).items()
                       if "." not in k and k not in ("command", "config", "set", "verbose")},
            **cfg}
    (run_dir / "config.yaml").write_text(yaml.safe_dump(echo, sort_keys=True), encoding="utf-8")
    handlers = _setup_logging(run_dir, args.verbose)
    try:
        with threadpool_limits(limits=cfg["run"]["threads"]):
            return COMMANDS[args.command](args, cfg, run_dir)
    except MissingInputError as exc:
        print(f"adaptrec: error: input not found: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, GraphError, ProtocolError, ValueError) as exc:
        log.error("%s", exc)
        print(f"adaptrec: error: {exc}", file=sys.stderr)
        return 1
    finally:
        print(f"run directory: {run_dir}", file=sys.stderr)
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
