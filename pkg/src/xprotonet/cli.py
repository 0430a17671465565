"""Command line entry point: ``xprotonet <subcommand> --config run.yaml --out DIR``.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure. A failed run
leaves a ``FAILED`` file in its output directory holding the error message.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config
from .data import write_split_manifest, write_synthetic_dataset
from .exceptions import ConfigError, DataError
from .explain import evaluate, render_global, render_local
from .model import project_prototypes, prune_prototypes
from .pipeline import PreparedData, prepare_data, synthetic_spec, train_model

log = logging.getLogger("xprotonet")

COMMANDS = ("synth-data", "train", "train-prior", "evaluate", "project", "prune", "explain", "compare-baselines")
NEEDS_CHECKPOINT = {"evaluate", "project", "prune", "explain"}
FAILED_MARKER = "FAILED"
RESOLVED_CONFIG = "run_config.yaml"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xprotonet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration; desk-scale defaults when omitted")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="seed for data, initialization and batching")
        p.add_argument("--checkpoint", required=name in NEEDS_CHECKPOINT, help="checkpoint directory to load")
        p.add_argument("--variant", choices=("xprotonet", "patch", "gap"))
        p.add_argument("--patch-r", type=int, dest="patch_r")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    model = {}
    if args.variant is not None:
        model["variant"] = args.variant
    if args.patch_r is not None:
        model["patch_r"] = args.patch_r
    if args.seed is not None:
        model["seed"] = args.seed
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed),
                                  data=dataclasses.replace(cfg.data, seed=args.seed))
    if model:
        try:
            cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **model))
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc
    return cfg


def auc_table(rows: dict[str, dict]) -> str:
    """Tab-separated per-class AUC table; one column per run."""
    runs = list(rows)
    classes = list(next(iter(rows.values()))["per_class"]) if rows else []

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    lines = ["class\t" + "\t".join(runs)]
    for c in classes:
        lines.append(c + "\t" + "\t".join(fmt(rows[r]["per_class"][c]) for r in runs))
    lines.append("mean\t" + "\t".join(fmt(rows[r]["mean_auc"]) for r in runs))
    return "\n".join(lines) + "\n"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _test_report(model, data: PreparedData, out: Path, name: str) -> dict:
    result = evaluate(model, data.test.images, data.test.labels.numpy()).to_dict()
    _write_json(out / "eval.json", result)
    table = auc_table({name: result})
    (out / "auc_table.tsv").write_text(table)
    print(table, end="")
    return result


def _save_model(model, data: PreparedData, path: Path) -> None:
    save_checkpoint(path, model, hyperparameters={"mean": list(data.mean), "std": list(data.std)})


def _load_model(args):
    model, _, _, _ = load_checkpoint(args.checkpoint)
    return model


# -- subcommands


def cmd_synth_data(cfg: RunConfig, args, out: Path) -> None:
    d = cfg.data
    write_synthetic_dataset(synthetic_spec(cfg), d.n_train + d.n_val + d.n_test, out)


def _train(cfg: RunConfig, out: Path, prior: bool) -> None:
    data = prepare_data(cfg)
    write_split_manifest(data.splits, out / "splits")
    model, state = train_model(cfg, data, out, prior=prior)
    _save_model(model, data, out / "model")
    _write_json(out / "train_summary.json", {"best_val_auc": state.best_val_auc, "cycles": state.cycle,
                                             "steps": len(state.history)})
    _test_report(model, data, out, cfg.model.variant)


def cmd_train(cfg, args, out):
    _train(cfg, out, prior=False)


def cmd_train_prior(cfg, args, out):
    _train(cfg, out, prior=True)


def cmd_evaluate(cfg, args, out):
    model = _load_model(args)
    data = prepare_data(cfg)
    _test_report(model, data, out, model.variant)


def cmd_project(cfg, args, out):
    model = _load_model(args)
    data = prepare_data(cfg)
    tr = data.train
    project_prototypes(model, tr.images, tr.labels, tr.ids)
    _save_model(model, data, out / "model")


def cmd_prune(cfg, args, out):
    model = _load_model(args)
    before = int(model.active.sum())
    prune_prototypes(model)
    after = int(model.active.sum())
    save_checkpoint(out / "model", model)
    print(f"pruned {before - after} of {before} prototypes")


def cmd_explain(cfg, args, out):
    model = _load_model(args)
    data = prepare_data(cfg)
    ex = cfg.explain
    local_dir = out / "local"
    local_dir.mkdir(parents=True, exist_ok=True)
    test = data.test
    for i in range(min(ex.max_images, len(test))):
        expl, overlays = render_local(model, test.images[i], test.ids[i], ex.contour_level, ex.colormap, ex.alpha)
        stem = Path(test.ids[i]).stem
        (local_dir / f"{stem}.json").write_text(expl.to_document() + "\n")
        for (c, k), png in overlays.items():
            (local_dir / f"{stem}_{model.class_names[c]}_{k}.png").write_bytes(png)
    if model.provenance:
        tr = data.train
        records = render_global(model, tr.ids, tr.labels.numpy(), tr.subset(
            [i for i in range(len(tr)) if tr.pixel_masks[i].any()]), ex.contour_level)
        docs = [json.loads(r.to_document()) for r in records]
        _write_json(out / "global.json", docs)
    else:
        log.warning("checkpoint has no projection provenance; global explanations skipped")


def cmd_compare_baselines(cfg, args, out):
    data = prepare_data(cfg)
    write_split_manifest(data.splits, out / "splits")
    results = {}
    for variant in ("xprotonet", "patch", "gap"):
        run_cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, variant=variant))
        label = f"patch_r{cfg.model.patch_r}" if variant == "patch" else variant
        run_out = out / label
        run_out.mkdir(parents=True, exist_ok=True)
        model, _ = train_model(run_cfg, data, run_out)
        _save_model(model, data, run_out / "model")
        results[label] = evaluate(model, data.test.images, data.test.labels.numpy()).to_dict()
    _write_json(out / "comparison.json", results)
    table = auc_table(results)
    (out / "comparison.tsv").write_text(table)
    print(table, end="")


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "train-prior": cmd_train_prior,
    "evaluate": cmd_evaluate,
    "project": cmd_project,
    "prune": cmd_prune,
    "explain": cmd_explain,
    "compare-baselines": cmd_compare_baselines,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILED_MARKER).unlink(missing_ok=True)
        cfg = resolve_config(args)
        dump_config(cfg, out / RESOLVED_CONFIG)
        print(Path(out / RESOLVED_CONFIG).read_text(), end="", file=sys.stderr)
        HANDLERS[args.command](cfg, args, out)
    except ConfigError as exc:
        return _fail(out, f"config error: {exc}", 1)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        log.debug("run failed", exc_info=True)
        kind = "data error" if isinstance(exc, DataError) else type(exc).__name__
        return _fail(out, f"{kind}: {exc}", 2)
    return 0


def _fail(out: Path, message: str, code: int) -> int:
    print(message, file=sys.stderr)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILED_MARKER).write_text(message + "\n")
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
