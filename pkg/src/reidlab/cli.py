"""Command-line interface.

Subcommands: gen (synthesize a dataset directory), train (train or grid
search from a config), eval (reports for a checkpoint or for external
embedding files), repro (the packaged multi-seed experiment suites).

Configs are YAML with three sections (data, train, eval); unknown keys
are rejected. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
error. All outputs are deterministic functions of config + seed; rerun
any command and the output bytes repeat.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import evalkit, fileio
from .errors import ConfigError, DataError, NumericError
from .evalkit import (
    EmbeddingSet,
    SUITE_NAMES,
    evaluate_sets,
    report_csv,
    report_markdown,
    run_suite,
    table_csv,
    table_markdown,
    trainset_view,
)
from .model import FUSED_SELECTOR, embed_dataset, load_checkpoint
from .numerics import Rng
from .objectives import FusionOperator, LossConfig, fuse, strategy_from_name
from .pipeline import TrainConfig, config_hash, grid_search, train
from .synthdata import (
    SPLIT_GALLERY,
    MultimodalDataset,
    SynthConfig,
    generate,
    preset,
    split_query_gallery,
)

_DATA_KEYS = {
    "preset", "dir", "num_modalities", "latent_dim", "obs_dim", "ids_train",
    "ids_test", "views_per_id", "signal_scale", "view_jitter", "noise_sigma",
    "spurious_dim", "spurious_strength", "seed",
}
_TRAIN_KEYS = {
    "strategy", "p", "k", "lr_base", "momentum", "epochs", "warmup_epochs",
    "lambda_ce", "margin", "hidden_dims", "embed_dim", "seed", "grid",
}
_GRID_KEYS = {"batch_sizes", "lr_values"}
_EVAL_KEYS = {"exclude_same_view", "max_rank", "views_as_query", "seed", "normalize_first"}
_TOP_KEYS = {"data", "train", "eval"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) {unknown} in {where}; allowed: {sorted(allowed)}"
        )


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    _check_keys(cfg, _TOP_KEYS, "config")
    for name, keys in (("data", _DATA_KEYS), ("train", _TRAIN_KEYS), ("eval", _EVAL_KEYS)):
        if name in cfg:
            if not isinstance(cfg[name], dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            _check_keys(cfg[name], keys, f"section {name!r}")
    grid = cfg.get("train", {}).get("grid")
    if grid is not None:
        if not isinstance(grid, dict):
            raise ConfigError("train.grid must be a mapping")
        _check_keys(grid, _GRID_KEYS, "train.grid")


def apply_overrides(cfg: dict, sets: list) -> dict:
    """--set a.b.c=value overrides, parsed as YAML scalars."""
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key_path, value_str = item.split("=", 1)
        keys = key_path.strip().split(".")
        try:
            value = yaml.safe_load(value_str)
        except yaml.YAMLError:
            raise ConfigError(f"--set {item!r}: cannot parse value") from None
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {item!r}: {k!r} is not a mapping")
        node[keys[-1]] = value
    validate_config(cfg)
    return cfg


def synth_config_from(data: dict) -> SynthConfig:
    fields = {k: v for k, v in data.items() if k not in ("preset", "dir")}
    if "preset" in data:
        base = preset(str(data["preset"]), int(fields.pop("seed", 0)))
        base_dict = fileio.synth_config_dict(base)
        base_dict.update(fields)
        fields = base_dict
    try:
        cfg = SynthConfig(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad data section: {exc}") from None
    cfg.validate()
    return cfg


def train_config_from(tr: dict) -> tuple[TrainConfig, Optional[dict]]:
    tr = dict(tr)
    grid = tr.pop("grid", None)
    loss = LossConfig(
        lambda_ce=float(tr.pop("lambda_ce", 1.0)),
        margin=float(tr.pop("margin", 0.0)),
    )
    if "strategy" in tr:
        tr["strategy"] = strategy_from_name(str(tr["strategy"]))
    if "hidden_dims" in tr:
        dims = tr["hidden_dims"]
        if not isinstance(dims, (list, tuple)):
            raise ConfigError(f"train.hidden_dims must be a list, got {dims!r}")
        tr["hidden_dims"] = tuple(int(d) for d in dims)
    try:
        cfg = TrainConfig(loss=loss, **tr)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from None
    cfg.validate()
    if grid is not None:
        if not grid.get("batch_sizes") or not grid.get("lr_values"):
            raise ConfigError("train.grid needs non-empty batch_sizes and lr_values")
    return cfg, grid


@dataclass
class EvalOptions:
    exclude_same_view: bool = False
    max_rank: int = 50
    views_as_query: int = 2
    seed: int = 0
    normalize_first: Optional[bool] = None


def eval_options_from(ev: dict) -> EvalOptions:
    opts = EvalOptions(**{k: v for k, v in ev.items()})
    if opts.max_rank < 1:
        raise ConfigError(f"eval.max_rank must be >= 1, got {opts.max_rank}")
    if opts.views_as_query < 1:
        raise ConfigError(f"eval.views_as_query must be >= 1, got {opts.views_as_query}")
    return opts


def _load_or_generate(cfg: dict) -> tuple[MultimodalDataset, Optional[SynthConfig], str]:
    data = cfg.get("data")
    if not data:
        raise ConfigError("config needs a data section (preset/fields or dir)")
    if "dir" in data:
        extra = sorted(set(data) - {"dir"})
        if extra:
            raise ConfigError(f"data.dir cannot be combined with {extra}")
        ds, manifest = fileio.read_dataset(data["dir"])
        return ds, None, f"dataset dir {data['dir']}"
    scfg = synth_config_from(data)
    return generate(scfg), scfg, f"generated (seed {scfg.seed})"


def cmd_gen(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    data = cfg.get("data")
    if not data:
        raise ConfigError("gen needs a data section")
    if "dir" in data:
        raise ConfigError("gen generates a dataset; remove data.dir from the config")
    scfg = synth_config_from(data)
    ds = generate(scfg)
    fileio.write_dataset(ds, args.out, scfg)
    print(f"wrote {ds.num_modalities} modality file(s) + manifest to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    ds, _, source = _load_or_generate(cfg)
    tcfg, grid = train_config_from(cfg.get("train", {}))
    out = Path(args.out)
    if grid is None:
        rec = train(ds, tcfg)
        fileio.write_run_record(rec, out, extra={"data_source": source})
        print(f"trained {tcfg.strategy.value}: final loss {rec.epoch_losses[-1]:.4f} -> {out}")
        return 0
    result = grid_search(ds, grid["batch_sizes"], grid["lr_values"], tcfg)
    for cell, rec in zip(result.cells, result.cell_records):
        fileio.write_run_record(
            rec,
            out / f"cell_bs{cell.batch_size}_lr{cell.lr:g}",
            extra={"val_map": cell.val_map, "val_rank1": cell.val_rank1},
        )
    fileio.write_run_record(result.best, out, extra={"data_source": source})
    selection = {
        "cells": [
            {
                "batch_size": c.batch_size, "lr": c.lr, "p": c.p, "k": c.k,
                "val_map": c.val_map, "val_rank1": c.val_rank1,
            }
            for c in result.cells
        ],
        "selected": {"batch_size": result.best_cell.batch_size, "lr": result.best_cell.lr},
    }
    fileio.dump_json(selection, out / "selection.json")
    print(
        f"grid search done: best bs={result.best_cell.batch_size} lr={result.best_cell.lr:g} "
        f"(val mAP {result.best_cell.val_map:.4f}) -> {out}"
    )
    return 0


def _write_report(out: Path, name: str, report, q_ids, header: str) -> None:
    (out / f"report_{name}.csv").write_text(report_csv(report, q_ids), encoding="utf-8")
    (out / f"report_{name}.md").write_text(report_markdown(report, header), encoding="utf-8")


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = apply_overrides(load_config(args.config) if args.config else {}, args.set)
    opts = eval_options_from(cfg.get("eval", {}))
    if args.external:
        return _eval_external(args, cfg, opts, out)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint (or --external files)")
    model = load_checkpoint(args.checkpoint)
    ds, _, source = _load_or_generate(cfg)
    if ds.num_modalities != model.num_streams:
        raise DataError(
            f"checkpoint has {model.num_streams} streams but dataset has "
            f"{ds.num_modalities} modalities"
        )
    for i, s in enumerate(model.streams):
        want = s.weights[0].shape[1]
        have = ds.features[i].shape[1]
        if want != have:
            raise DataError(
                f"stream {i} expects input dim {want}, dataset modality has {have}"
            )
    view = trainset_view(ds, opts.views_as_query, opts.seed) if args.trainset else ds
    selectors = [(FUSED_SELECTOR, "multimodal")] + [
        (i, f"mod{i}") for i in range(model.num_streams)
    ]
    summary = [
        f"# Evaluation {'(train split)' if args.trainset else '(test split)'}",
        "",
        f"- source: {source}",
        f"- checkpoint: {args.checkpoint}",
        f"- strategy: {model.strategy.value}",
        f"- eval options hash: {config_hash(vars(opts) | {'trainset': bool(args.trainset)})}",
        "",
    ]
    for selector, name in selectors:
        q, g = evalkit.embedding_sets(model, view, selector, opts.normalize_first)
        report = evaluate_sets(q, g, opts.exclude_same_view, opts.max_rank)
        _write_report(out, name, report, q.ids, f"{name} ({model.strategy.value})")
        summary.append(
            f"- {name}: mAP {100 * report.map:.2f}%, Rank-1 {100 * report.rank1:.2f}%"
            f" ({report.num_skipped_queries} skipped)"
        )
    (out / "summary.md").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print(f"wrote {len(selectors)} report pair(s) to {out}")
    return 0


def _eval_external(args, cfg: dict, opts: EvalOptions, out: Path) -> int:
    records = [fileio.read_embedding_file(f) for f in args.external]
    names = []
    for rec in records:
        name = rec.name or "embeddings"
        while name in names:
            name += "+"
        names.append(name)
    base = records[0]
    for rec, name in zip(records[1:], names[1:]):
        if not (np.array_equal(rec.ids, base.ids) and np.array_equal(rec.view_ids, base.view_ids)):
            raise DataError(f"external file {name!r}: ids/view_ids differ from the first file")
    holder = MultimodalDataset(
        features=[rec.features for rec in records],
        ids=base.ids,
        view_ids=base.view_ids,
        split=np.full(base.ids.shape[0], SPLIT_GALLERY, dtype=np.int8),
        modality_names=names,
    )
    split_ds = split_query_gallery(holder, opts.views_as_query, Rng(opts.seed).split("external-eval"))
    q_rows, g_rows = split_ds.query_rows, split_ds.gallery_rows
    op = FusionOperator(args.fusion_op)
    normalize = True if opts.normalize_first is None else opts.normalize_first
    summary = [
        "# External embedding evaluation",
        "",
        f"- files: {', '.join(str(f) for f in args.external)}",
        f"- fusion: {op.value} (normalize_first={normalize})",
        "",
    ]
    evals = [(name, [feats]) for name, feats in zip(names, split_ds.features)]
    if len(records) > 1:
        evals.append(("multimodal", split_ds.features))
    for name, feats in evals:
        fused_all = fuse(feats, op, normalize_first=normalize) if len(feats) > 1 else feats[0]
        q = EmbeddingSet(fused_all[q_rows], split_ds.ids[q_rows], split_ds.view_ids[q_rows], "query")
        g = EmbeddingSet(fused_all[g_rows], split_ds.ids[g_rows], split_ds.view_ids[g_rows], "gallery")
        report = evaluate_sets(q, g, opts.exclude_same_view, opts.max_rank)
        _write_report(out, name, report, q.ids, f"{name} (external)")
        summary.append(
            f"- {name}: mAP {100 * report.map:.2f}%, Rank-1 {100 * report.rank1:.2f}%"
            f" ({report.num_skipped_queries} skipped)"
        )
    (out / "summary.md").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print(f"wrote {len(evals)} report pair(s) to {out}")
    return 0


def cmd_repro(args) -> int:
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    result = run_suite(args.suite, seeds, epochs=args.epochs, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .evalkit import suite_epochs, suite_train_config
    from .pipeline import config_dict

    epochs = suite_epochs(args.suite, args.epochs)
    run_desc = {
        "suite": args.suite,
        "seeds": seeds,
        "epochs": epochs,
        "train_recipe": None,
    }
    run_desc["train_recipe"] = config_dict(suite_train_config(strategy_from_name("unicat"), seeds[0], epochs))
    run_desc["config_hash"] = config_hash({k: v for k, v in run_desc.items() if k != "config_hash"})
    fileio.dump_json(run_desc, out / "config.json")
    md = table_markdown(result.table) + f"\nconfig_hash: {run_desc['config_hash']}\n"
    (out / "table.md").write_text(md, encoding="utf-8")
    (out / "table.csv").write_text(table_csv(result.table), encoding="utf-8")
    raw_lines = ["seed,strategy,target,map,rank1"]
    for (seed, s, t), (m, r1) in result.raw.items():
        raw_lines.append(f"{seed},{s},{t},{m!r},{r1!r}")
    (out / "raw.csv").write_text("\n".join(raw_lines) + "\n", encoding="utf-8")
    claim_lines = [c.line() for c in result.claims]
    (out / "claims.txt").write_text("\n".join(claim_lines) + "\n", encoding="utf-8")
    for line in claim_lines:
        print(line)
    print(f"wrote suite outputs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reidlab",
        description="Multimodal metric-learning lab: synthetic ReID data, "
        "late-fusion training strategies, retrieval evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model (or run the configured grid search)")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or external embedding files")
    p.add_argument("-c", "--config")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--trainset", action="store_true", help="evaluate on the train split")
    p.add_argument("--external", nargs="+", metavar="FILE", help="embedding files; skips the model")
    p.add_argument("--fusion-op", choices=[o.value for o in FusionOperator], default="concat")
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("repro", help="run a packaged multi-seed experiment suite")
    p.add_argument("suite", choices=list(SUITE_NAMES))
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (default 5)")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None, help="override the suite's epoch count")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
