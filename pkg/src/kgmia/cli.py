"""``kgmia`` command line: split, train, calibrate, attack, ablate, synth, report, run.

Every subcommand writes only below ``--out``. Options may also come from a
``key=value`` file given with ``--config``; flags on the command line win.
Failures exit nonzero with one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import errno
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .attacks import TA
from .data import (DataError, file_checksum, load_split, load_tsv, make_split, save_split, save_tsv,
                   synthetic_kg, write_triples_tsv)
from .evaluation import (DATASET_AXIS, MODEL_AXIS, REGIMES, ExperimentConfig, GridSpec, attack_target,
                         build_context, heat_table, markdown_summary, read_reports_csv, run_ablation,
                         run_experiment, shadow_fit_split, target_fit_split, write_grid, write_reports_csv,
                         write_run_outputs)
from .models import L1, L2, LOGISTIC, MARGIN, MODEL_KINDS, TrainResult, load_model, save_model, train
from .oracle import ClassifierCalibration, TargetOracle
from .rng import make_rng

log = logging.getLogger("kgmia")

PARTS = ("target_train", "shadow_train")


class CliError(Exception):
    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = None if path is None else str(path)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _default_seed() -> int:
    raw = os.environ.get("KGMIA_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"KGMIA_SEED must be an integer, got {raw!r}") from None


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(errno.ENOENT, "no such file or directory", str(p))
    return p


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, keys use flag spelling."""
    out = {}
    for lineno, line in enumerate(_existing(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value", path)
        key, value = (x.strip() for x in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


# --------------------------------------------------------------------------
# argument groups

def _add_common(p):
    p.add_argument("--out", "-o", default="kgmia-out", help="output directory (default: kgmia-out)")
    p.add_argument("--seed", type=int, default=None, help="run seed (default: $KGMIA_SEED or 0)")
    p.add_argument("--config", help="key=value file with defaults for any long option")


def _add_training(p):
    g = p.add_argument_group("training")
    g.add_argument("--model", default="TransE", help=f"one of {', '.join(MODEL_KINDS)}")
    g.add_argument("--epochs", type=int, default=100, help="default-regime epoch budget")
    g.add_argument("--regime", choices=list(REGIMES), default="default",
                   help="scales epochs by 0.1, 1 or 5")
    g.add_argument("--dim", type=int, default=50)
    g.add_argument("--lr", type=float, default=None, dest="learning_rate", help="SGD step (default 0.5)")
    g.add_argument("--margin", type=float, default=4.0)
    g.add_argument("--negatives", type=int, default=1, dest="negatives_per_positive")
    g.add_argument("--batch-size", type=int, default=128)
    g.add_argument("--loss", choices=[MARGIN, LOGISTIC], default=None, dest="loss_kind",
                   help="default: margin for TransE/TransH, logistic otherwise")
    g.add_argument("--norm", choices=[L1, L2], default=L1)
    g.add_argument("--validation-fraction", type=float, default=0.1)


def _add_attack_opts(p):
    g = p.add_argument_group("attack")
    g.add_argument("--pla-metric", choices=[LOGISTIC, MARGIN], default=LOGISTIC)
    g.add_argument("--pla-k", type=int, default=1, help="corruptions per candidate for the margin metric")
    g.add_argument("--per-relation", type=_bool, default=True, help="per-relation thresholds (default true)")
    g.add_argument("--ta-standardize", type=_bool, default=False)
    g.add_argument("--ta-epochs", type=int, default=200)
    g.add_argument("--ta-lr", type=float, default=0.01)
    g.add_argument("--ta-batch-size", type=int, default=128)


def _experiment_config(a, **extra) -> ExperimentConfig:
    fields = ExperimentConfig.__dataclass_fields__
    kw = {k: getattr(a, k) for k in fields if hasattr(a, k)}
    kw.update(extra)
    return ExperimentConfig(**kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgmia", description="Membership inference against knowledge graph embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress lines on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic KG as TSV")
    _add_common(p)
    p.add_argument("--entities", type=int, default=1000)
    p.add_argument("--relations", type=int, default=10)
    p.add_argument("--triples", type=int, default=20000)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--name", default="synthetic.tsv", help="file name inside --out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="split TSV data into target/shadow train/test parts")
    _add_common(p)
    p.add_argument("data", nargs="+", help="TSV file(s); several files are merged first")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on one split part")
    _add_common(p)
    p.add_argument("--split", required=True, help="directory written by 'split'")
    p.add_argument("--part", choices=PARTS, default="target_train")
    p.add_argument("--jobs", type=int, default=1, help="training threads; >1 gives up determinism")
    p.add_argument("--name", default=None, help="model file stem (default: the part name)")
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit label thresholds for a trained model")
    _add_common(p)
    p.add_argument("--model-file", required=True, help=".kgem file written by 'train'")
    p.add_argument("--per-relation", type=_bool, default=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("attack", help="run TA, PLA or PCA against a trained target")
    _add_common(p)
    p.add_argument("kind", choices=["ta", "pla", "pca"])
    p.add_argument("--split", required=True)
    p.add_argument("--model-file", required=True, help="target .kgem file")
    p.add_argument("--shadow-model-file", help="shadow .kgem file (TA only)")
    p.add_argument("--calibration", help="thresholds from 'calibrate' (default: recalibrate)")
    p.add_argument("--dataset-name", default=None)
    _add_attack_opts(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("ablate", help="transfer-attack grid over shadow datasets or shadow models")
    _add_common(p)
    p.add_argument("axis", choices=["dataset", "model"])
    p.add_argument("--data", action="append", default=[], metavar="NAME=PATH",
                   help="dataset TSV; repeat for the dataset axis")
    p.add_argument("--models", default=",".join(MODEL_KINDS), help="comma list for the model axis")
    p.add_argument("--jobs", type=int, default=1, help="grid cells in parallel")
    _add_training(p)
    _add_attack_opts(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("run", help="split, train, calibrate and attack in one go")
    _add_common(p)
    p.add_argument("kind", choices=["ta", "pla", "pca"])
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--dataset-name", default=None)
    p.add_argument("--shadow-model", default=None, help="shadow architecture for TA")
    _add_training(p)
    _add_attack_opts(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="merge report CSVs and print a markdown summary")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="report CSV files or directories holding them")
    p.set_defaults(func=cmd_report)
    return parser


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(a) -> int:
    store = synthetic_kg(a.entities, a.relations, a.triples, seed=a.seed, n_clusters=a.clusters)
    out = a.out / a.name
    save_tsv(store, out)
    print(f"wrote {len(store)} triples over {store.n_entities} entities and {store.n_relations} relations to {out}")
    return 0


def cmd_split(a) -> int:
    paths = [_existing(p) for p in a.data]
    store = load_tsv(*paths)
    plan = make_split(store, a.seed)
    checksum = file_checksum(paths[0]) if len(paths) == 1 else "+".join(file_checksum(p) for p in paths)
    save_split(plan, store, a.out, source_checksum=checksum)
    sizes = plan.sizes()
    print(f"split {len(store)} triples (dropped {store.duplicates_dropped} duplicates): "
          + ", ".join(f"{k}={v}" for k, v in sizes.items()))
    return 0


def _fit_split(part: str, plan, seed: int, fraction: float):
    return (target_fit_split if part == "target_train" else shadow_fit_split)(plan, seed, fraction)


def cmd_train(a) -> int:
    store, plan, _ = load_split(_existing(a.split))
    fit, valid = _fit_split(a.part, plan, a.seed, a.validation_fraction)
    config = _experiment_config(a)
    cfg = (config.target_train_config if a.part == "target_train" else config.shadow_train_config)(a.model, a.seed)
    if a.jobs > 1:
        cfg = replace(cfg, workers=a.jobs)
    log.info("training %s on %d %s triples for %d epochs", cfg.model_kind, len(fit), a.part, cfg.epochs)
    result = train(fit, store.n_entities, store.n_relations, cfg)
    stem = a.name or a.part
    model_path = a.out / f"{stem}.kgem"
    save_model(result.model, model_path)
    write_triples_tsv(store, valid, a.out / f"{stem}.validation.tsv")
    sidecar = {
        "split": str(Path(a.split).resolve()), "part": a.part, "seed": a.seed,
        "experiment": config.as_dict(), "train_config": cfg.as_dict(),
        "n_fit": len(fit), "n_validation": len(valid),
        "deterministic": result.deterministic, "loss_curve": result.loss_curve,
    }
    (a.out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    curve = result.loss_curve
    print(f"{cfg.model_kind}: loss {curve[0]:.4f} (epoch 1) -> {curve[-1]:.4f} (epoch {len(curve)}); "
          f"model at {model_path}")
    return 0


def _sidecar(model_file: Path) -> dict:
    path = model_file.with_suffix(".json")
    return json.loads(_existing(path).read_text())


def _seed_from(meta: dict, a) -> int:
    # the model's own seed wins; an explicit --seed that disagrees is an error
    if a.seed_given and a.seed != meta["seed"]:
        raise CliError(f"--seed {a.seed} differs from the seed {meta['seed']} the model was trained with")
    return int(meta["seed"])


def cmd_calibrate(a) -> int:
    model_file = _existing(a.model_file)
    meta = _sidecar(model_file)
    seed = _seed_from(meta, a)
    store, plan, _ = load_split(_existing(meta["split"]))
    _, valid = _fit_split(meta["part"], plan, seed, meta["experiment"]["validation_fraction"])
    oracle = TargetOracle(load_model(model_file))
    calib = oracle.calibrate(valid, make_rng(seed, "calibrate"), per_relation=a.per_relation)
    out = a.out / f"{model_file.stem}.calibration.tsv"
    calib.save(out)
    print(f"global threshold {calib.global_threshold:.6g} (validation accuracy {calib.global_accuracy:.4f}); "
          f"{len(calib.thresholds)} relation thresholds written to {out}")
    return 0


def cmd_attack(a) -> int:
    kind = a.kind.upper()
    model_file = _existing(a.model_file)
    meta = _sidecar(model_file)
    if meta["part"] != "target_train":
        raise CliError(f"{model_file} was trained on {meta['part']}, not on the target split", model_file)
    seed = _seed_from(meta, a)
    store, plan, manifest = load_split(_existing(a.split))
    config = ExperimentConfig(**{**meta["experiment"], **{
        k: getattr(a, k) for k in ("pla_metric", "pla_k", "per_relation", "ta_standardize",
                                   "ta_epochs", "ta_lr", "ta_batch_size")}})
    calibration = ClassifierCalibration.load(_existing(a.calibration)) if a.calibration else None
    model = load_model(model_file)
    name = a.dataset_name or Path(a.split).resolve().name
    ctx = build_context(store, plan, TrainResult(model, meta["loss_curve"]), config, seed, name, calibration)
    shadow = None
    if kind == TA:
        if not a.shadow_model_file:
            raise CliError("the transfer attack needs --shadow-model-file (train with --part shadow_train)")
        shadow_file = _existing(a.shadow_model_file)
        shadow_meta = _sidecar(shadow_file)
        if shadow_meta["part"] != "shadow_train" or shadow_meta["seed"] != seed:
            raise CliError(f"{shadow_file} is not a shadow model trained with seed {seed}", shadow_file)
        shadow = load_model(shadow_file)
    report, decisions, truth = attack_target(ctx, kind, shadow_model=shadow)
    write_run_outputs(report, decisions, truth, a.out)
    _print_report(report)
    return 0


def _print_report(r) -> None:
    extra = f" shadow={r.shadow_model_kind}" if r.shadow_model_kind else ""
    print(f"{r.attack_kind} {r.model_kind}{extra} on {r.dataset_name}: accuracy={r.accuracy:.4f} f1={r.f1:.4f} "
          f"precision={r.precision:.4f} recall={r.recall:.4f} overfit={r.overfit_level:.4f} "
          f"decisions={r.decisions_path}")


def _named_data(items) -> dict:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        out[name] = load_tsv(_existing(path))
    if not out:
        raise CliError("no dataset given; pass --data NAME=PATH")
    return out


def cmd_ablate(a) -> int:
    datasets = _named_data(a.data)
    config = _experiment_config(a)
    if a.axis == "dataset":
        names = list(datasets)
        spec = GridSpec(DATASET_AXIS, names, names, datasets, config, a.seed, model_kind=a.model, jobs=a.jobs)
    else:
        kinds = [k.strip() for k in a.models.split(",") if k.strip()]
        spec = GridSpec(MODEL_AXIS, kinds, kinds, datasets, config, a.seed,
                        dataset=next(iter(datasets)), jobs=a.jobs)
    grid = run_ablation(spec)
    write_grid(grid, a.out)
    print(heat_table(grid))
    for (i, j), err in grid.errors.items():
        print(f"cell {grid.rows[i]} / {grid.columns[j]} failed: {err}", file=sys.stderr)
    return 0 if not grid.errors else 3


def cmd_run(a) -> int:
    store = load_tsv(*[_existing(p) for p in a.data])
    config = _experiment_config(a)
    name = a.dataset_name or Path(a.data[0]).stem
    report = run_experiment(store, a.model, a.kind.upper(), config, a.seed, dataset_name=name,
                            shadow_model_kind=a.shadow_model, out_dir=a.out)
    _print_report(report)
    return 0


def cmd_report(a) -> int:
    files = []
    for item in a.inputs:
        p = _existing(item)
        files += sorted(p.glob("report_*.csv")) if p.is_dir() else [p]
    if not files:
        raise CliError("no report CSVs found", a.inputs[0])
    reports = [r for f in files for r in read_reports_csv(f)]
    write_reports_csv(reports, a.out / "reports.csv")
    text = markdown_summary(reports)
    (a.out / "summary.md").write_text(text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------

def _apply_config_file(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    values = read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dest_of = {}
    for act in sub._actions:
        dest_of[act.dest] = act.dest
        for opt in act.option_strings:
            dest_of[opt.lstrip("-").replace("-", "_")] = act.dest
    unknown = sorted(k for k in values if k not in dest_of or k == "config")
    if unknown:
        raise CliError(f"{args.config}: unknown option(s) {', '.join(unknown)}", args.config)
    # string defaults are converted by each option's type
    sub.set_defaults(**{dest_of[k]: v for k, v in values.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        args.seed_given = args.seed is not None
        if args.seed is None:
            args.seed = _default_seed()
        args.out = Path(args.out)
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except CliError as exc:
        return _fail(type(exc).__name__, str(exc), exc.path)
    except FileNotFoundError as exc:
        return _fail(type(exc).__name__, exc.strerror or str(exc), exc.filename)
    except (DataError, ValueError, RuntimeError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), getattr(exc, "filename", None) or getattr(exc, "path", None))


def _fail(kind: str, message: str, path) -> int:
    payload = {"error": kind, "message": " ".join(str(message).split())}
    if path is not None:
        payload["path"] = str(path)
    print(json.dumps(payload), file=sys.stderr)
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
