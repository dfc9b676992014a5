"""Command-line entry point: ``shtocc <command> ...``.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure, 4 I/O or
format error. Progress goes to stderr; results go to files (``select`` and
``report`` may also print to stdout).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, io_formats, toynet
from .attention import AttentionMatrix, select_head
from .config import RunConfig, load_config
from .errors import ConfigError, NumericError, ShtoccError
from .io_formats import ParseError
from .metrics import sparsity_stats
from .synth import generate_scene
from .tail import CoarsePrediction, derive_taxonomy, select_tail
from .trainer import (Scene, TrainConfig, TrainingAborted, config_dict, evaluate, phase1_train,
                      phase2_retrain_head)
from .voxel_core import SelectionResult, SparseVoxelSet, sparsify

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("shtocc")


class UsageError(ShtoccError):
    """Bad command-line input; maps to exit code 2."""


# ---------------------------------------------------------------- helpers

def _scene_paths(directory) -> list[tuple[Path, Path]]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"scene directory {d} does not exist")
    pairs = []
    for lab in sorted(d.glob("scene_*_labels.shtv")):
        feat = lab.with_name(lab.name.replace("_labels.shtv", "_features.shtv"))
        if not feat.exists():
            raise UsageError(f"{lab.name} has no matching features file")
        pairs.append((lab, feat))
    if not pairs:
        raise UsageError(f"no scene_*_labels.shtv files in {d}")
    return pairs


def load_scenes(directory) -> list[Scene]:
    return [Scene(io_formats.read_shtv(f), io_formats.read_shtv(lab)) for lab, f in _scene_paths(directory)]


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_manifest(out: Path, command: str, cfg: RunConfig | None, inputs: dict, artifacts: list[str],
                   extra: dict | None = None) -> Path:
    """Everything needed to rerun the command; written before any heavy work."""
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": cfg.seed if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "config_text": cfg.to_text() if cfg is not None else None,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "artifacts": sorted(artifacts),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _ckpt_meta(cfg: TrainConfig, tax) -> dict:
    return {"taxonomy": io_formats.taxonomy_to_meta(tax), "train_config": config_dict(cfg),
            "selection": cfg.selection_meta()}


def _meta_train_config(meta: dict) -> TrainConfig:
    if "train_config" not in meta:
        return TrainConfig()
    try:
        return TrainConfig(**meta["train_config"])
    except TypeError as exc:
        raise ParseError(f"checkpoint train_config is malformed: {exc}", 0) from exc


def _taxonomy(cfg: RunConfig, scenes: list[Scene]):
    return derive_taxonomy([s.labels for s in scenes], cfg.train.tail_threshold, cfg.class_names)


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    out = _out_dir(args.out)
    names = [f"scene_{i:04d}_{kind}.shtv" for i in range(args.seeds) for kind in ("labels", "features")]
    write_manifest(out, "generate", cfg, {"config": args.config}, names, {"seeds": args.seeds})
    for i in range(args.seeds):
        labels, feats = generate_scene(cfg.scene.with_seed(cfg.seed + i))
        io_formats.write_shtv(labels, out / f"scene_{i:04d}_labels.shtv")
        io_formats.write_shtv(feats, out / f"scene_{i:04d}_features.shtv")
        log.info("scene %d written", i)
    return EXIT_OK


def _train_run(cfg: RunConfig, scenes: list[Scene], out: Path, skip_phase2: bool, tag: str = "") -> int:
    tcfg = cfg.train
    tax = _taxonomy(cfg, scenes)
    meta = _ckpt_meta(tcfg, tax)
    arch = tcfg.arch(scenes[0].features.channels, tax.num_classes)
    params = toynet.init_params(arch, np.random.default_rng(tcfg.seed))
    log_path = out / f"{tag}train_log.jsonl"
    records: list[dict] = []
    try:
        p1, log1 = phase1_train(tcfg, scenes, tax, params)
        records += log1.records
        io_formats.write_checkpoint(p1, out / f"{tag}checkpoint_phase1.ckpt", meta)
        if not skip_phase2:
            p2, log2 = phase2_retrain_head(tcfg, p1, scenes, tax)
            records += log2.records
            io_formats.write_checkpoint(p2, out / f"{tag}checkpoint_phase2.ckpt", meta)
    except TrainingAborted as exc:
        io_formats.write_checkpoint(exc.last_good, out / f"{tag}checkpoint_last_good.ckpt", meta)
        io_formats.write_jsonl(records + exc.log.records, log_path)
        log.error("training aborted: %s (last good parameters kept)", exc)
        return EXIT_NUMERIC
    io_formats.write_jsonl(records, log_path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    scenes = load_scenes(args.scenes)
    out = _out_dir(args.out)
    arts = ["train_log.jsonl", "checkpoint_phase1.ckpt"] + ([] if args.skip_phase2 else ["checkpoint_phase2.ckpt"])
    write_manifest(out, "train", cfg, {"scenes": args.scenes, "config": args.config}, arts,
                   {"skip_phase2": bool(args.skip_phase2)})
    return _train_run(cfg, scenes, out, args.skip_phase2)


def _load_sparse(path: Path) -> SparseVoxelSet:
    value = io_formats.read_shtv(path)
    if isinstance(value, SparseVoxelSet):
        return value
    if path.name.endswith("_features.shtv"):
        lab = _need_file(path.with_name(path.name.replace("_features.shtv", "_labels.shtv")), "label file")
        return sparsify(value, io_formats.read_shtv(lab))
    raise UsageError(f"{path} must be a sparse SHTV file or a scene_*_features.shtv file")


def selection_json(params, meta: dict, vox: SparseVoxelSet, k_fraction: float, tail_threshold=None) -> dict:
    """Head and tail selection for one sparse scene as a JSON-ready dict."""
    S = len(vox)
    if S == 0:
        raise UsageError("scene has no non-empty voxel")
    k = int(math.ceil(k_fraction * S))
    tr = toynet.encode(params, vox)
    head = select_head(AttentionMatrix(tr.mean_attention), vox.coords, k)
    if "taxonomy" not in meta:
        raise UsageError("checkpoint carries no class taxonomy; cannot select tail voxels")
    tax = io_formats.taxonomy_from_meta(meta["taxonomy"])
    out = {
        "S": S, "k": k, "k_fraction": k_fraction,
        "head": {"coords": head.coords.tolist(), "scores": head.scores.tolist()},
        "head_count": head.head_count(),
    }
    if tax.tail_set:
        tail = select_tail(CoarsePrediction(tr.coarse, vox.coords), tax, k, exclude=head.coords)
        out["tail"] = {"coords": tail.coords.tolist(), "scores": tail.scores.tolist(),
                       "multiplicity": tail.multiplicity.tolist()}
        out["tail_multiplicity_sum"] = tail.tail_total()
        both = SelectionResult.concat(head, tail)
    else:
        out["tail"] = {"coords": [], "scores": [], "multiplicity": []}
        out["tail_multiplicity_sum"] = 0
        both = head
    out["sparsity"] = sparsity_stats(both, S, S, vox.dims)
    return out


def cmd_select(args) -> int:
    if not 0 < args.k_fraction <= 1:
        raise UsageError(f"--k-fraction={args.k_fraction}: must be in (0, 1]")
    scene = _need_file(args.scene, "scene file")
    ckpt = _need_file(args.checkpoint, "checkpoint")
    params, meta = io_formats.read_checkpoint(ckpt)
    result = selection_json(params, meta, _load_sparse(scene), args.k_fraction)
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _need_file(args.checkpoint, "checkpoint")
    scenes = load_scenes(args.scenes)
    out = _out_dir(args.out)
    write_manifest(out, "eval", None, {"scenes": args.scenes, "checkpoint": args.checkpoint},
                   ["metrics.json", "per_class.csv"])
    params, meta = io_formats.read_checkpoint(ckpt)
    tcfg = _meta_train_config(meta)
    if "taxonomy" in meta:
        tax = io_formats.taxonomy_from_meta(meta["taxonomy"])
    else:
        tax = derive_taxonomy([s.labels for s in scenes], tcfg.tail_threshold)
    report = evaluate(params, scenes, tax, tcfg)
    io_formats.write_metrics_json(report, out / "metrics.json")
    io_formats.write_per_class_csv(report, out / "per_class.csv")
    log.info("mIoU %.4f (tail %s)", report.miou, report.tail_miou)
    return EXIT_OK


# the ablation ladder: each row switches one more mechanism on
LADDER = (
    ("baseline", dict(head_selection=False, tail_selection=False, tail_loss=False, decouple=False)),
    ("+head_selection", dict(head_selection=True, tail_selection=False, tail_loss=False, decouple=False)),
    ("+tail_selection", dict(head_selection=True, tail_selection=True, tail_loss=False, decouple=False)),
    ("+tail_loss", dict(head_selection=True, tail_selection=True, tail_loss=True, decouple=False)),
    ("+decouple", dict(head_selection=True, tail_selection=True, tail_loss=True, decouple=True)),
)
FLAG_COLUMNS = ("baseline", "head_selection", "tail_selection", "tail_loss", "decouple")
TABLE_COLUMNS = ("variant",) + FLAG_COLUMNS + ("miou", "head_miou", "tail_miou", "selected_fraction")


def split_scenes(scenes: list[Scene], eval_count: int) -> tuple[list[Scene], list[Scene]]:
    if eval_count == 0:
        return scenes, scenes
    if eval_count >= len(scenes):
        raise ConfigError(f"eval_count={eval_count}: must be < the number of scenes ({len(scenes)})")
    return scenes[:-eval_count], scenes[-eval_count:]


def run_ablation(cfg: RunConfig, scenes: list[Scene], log_dir: Path | None = None) -> list[dict]:
    train_s, eval_s = split_scenes(scenes, cfg.eval_count)
    tax = _taxonomy(cfg, train_s)
    arch = cfg.train.arch(train_s[0].features.channels, tax.num_classes)
    init = toynet.init_params(arch, np.random.default_rng(cfg.seed))
    rows = []
    for name, flags in LADDER:
        tcfg = replace(cfg.train, **flags)
        log.info("ablation variant %s", name)
        params, tlog = phase1_train(tcfg, train_s, tax, init)
        if tcfg.decouple:
            params, log2 = phase2_retrain_head(tcfg, params, train_s, tax)
            tlog = tlog.extend(log2)
        if log_dir is not None:
            io_formats.write_jsonl(tlog.records, log_dir / f"{name.lstrip('+')}.jsonl")
        rep = evaluate(params, eval_s, tax, tcfg)
        row = {"variant": name, "baseline": True}
        row.update({k: bool(flags[k]) for k in FLAG_COLUMNS[1:]})
        row.update(miou=rep.miou, head_miou=rep.head_miou, tail_miou=rep.tail_miou,
                   selected_fraction=rep.selected_fraction)
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.seed)
    scenes = load_scenes(args.scenes)
    out = _out_dir(args.out)
    train_s, eval_s = split_scenes(scenes, cfg.eval_count)
    logs = _out_dir(out / "logs")
    arts = ["ablation.json", "ablation.csv"] + [f"logs/{n.lstrip('+')}.jsonl" for n, _ in LADDER]
    write_manifest(out, "ablate", cfg, {"scenes": args.scenes, "config": args.config}, arts,
                   {"train_scenes": len(train_s), "eval_scenes": len(eval_s)})
    rows = run_ablation(cfg, scenes, logs)
    (out / "ablation.json").write_text(json.dumps({"columns": list(TABLE_COLUMNS), "rows": rows},
                                                  indent=2, sort_keys=True) + "\n")
    csv_rows = [{k: ("x" if v is True else "" if v is False else v) for k, v in r.items()} for r in rows]
    io_formats.write_table_csv(csv_rows, list(TABLE_COLUMNS), out / "ablation.csv")
    return EXIT_OK


LOG_COLUMNS = ("phase", "epoch", "baseline", "tvl", "total", "ls", "head_selected", "tail_selected",
               "unique_refined")


def cmd_report(args) -> int:
    """Flatten a run directory's training log into a CSV table (no figures)."""
    run = Path(args.run)
    logp = _need_file(run / "train_log.jsonl", "training log")
    rows = [{c: r.get(c) for c in LOG_COLUMNS} for r in io_formats.read_jsonl(logp)]
    text = io_formats.table_csv_text(rows, list(LOG_COLUMNS))
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shtocc", description="Sparse head-tail voxel selection toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic scenes as SHTV files")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seeds", type=int, default=1, help="number of scenes")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--scenes", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--skip-phase2", action="store_true")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("select", help="dump head and tail voxel selections as JSON")
    s.add_argument("--scene", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--k-fraction", type=float, default=0.05)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_select)

    e = sub.add_parser("eval", help="metrics JSON and per-class CSV for a checkpoint")
    e.add_argument("--scenes", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the five-variant ablation ladder")
    a.add_argument("--scenes", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="training log of a run directory as CSV")
    r.add_argument("--run", required=True)
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.ERROR if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ParseError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
