"""Command line: ``seril {gen,train,eval,report}``.

Exit status: 0 ok, 2 configuration error, 3 missing or corrupt artifact,
4 training divergence, 5 degenerate statistical input (outputs still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import Config
from .errors import ConfigError, DegenerateInputError, MissingArtifactError, SerilError
from .evaluate import evaluate, forgetting_matrix
from .formats import (
    atomic_write,
    file_checksum,
    read_checkpoint,
    read_volume,
    write_checkpoint,
    write_store,
    write_volume,
)
from .report import (
    metrics_csv,
    parse_metrics_csv,
    regime_charts,
    summary_csv,
    summary_rows,
    heatmap_svg,
)
from .trainer import TASKS, Checkpoint, RegimeRun, train_mert, train_sert, train_seril
from .world import EnvironmentSpec, TaskId, all_specs, generate_environment

log = logging.getLogger("seril")

ENV_MANIFEST = "manifest.json"
LOG_HEADER = "epoch,step,loss,mean_reward,epsilon"


def _dump_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=False) + "\n").encode())


def _load_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise MissingArtifactError(f"{path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise MissingArtifactError(f"{path}: not valid JSON ({e.msg})") from None


def _effective_config(args, seed_field: tuple[str, str] | None) -> Config:
    cfg = config_mod.load(args.config) if args.config else Config()
    if args.seed is not None and seed_field is not None:
        section, key = seed_field
        cfg = cfg.replace(**{section: {key: args.seed}})
    return cfg


# --- environment directory -------------------------------------------------------

def load_environments(envs_dir, names=None) -> dict:
    """Read ``.vol`` files listed in the gen manifest, verifying each checksum."""
    envs_dir = Path(envs_dir)
    manifest = _load_json(envs_dir / ENV_MANIFEST)
    out = {}
    for entry in manifest["environments"]:
        if names is not None and entry["name"] not in names:
            continue
        path = envs_dir / entry["file"]
        if not path.exists():
            raise MissingArtifactError(f"{path}: missing volume")
        if f"{file_checksum(path):016x}" != entry["fnv1a64"]:
            raise MissingArtifactError(f"{path}: checksum mismatch against {ENV_MANIFEST}")
        vol, lm = read_volume(path)
        out[vol.spec] = (vol, lm)
    if names is not None:
        missing = set(names) - {s.name for s in out}
        if missing:
            raise MissingArtifactError(f"{envs_dir}: no volume for {', '.join(sorted(missing))}")
    return out


# --- gen ----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _effective_config(args, ("geometry", "anatomy_seed"))
    out = Path(args.out)
    seed = cfg.geometry.anatomy_seed
    entries = []
    for spec in all_specs(seed):
        vol, lm = generate_environment(spec, cfg.geometry.volume)
        path = out / f"{spec.name}.vol"
        write_volume(path, vol, lm)
        entries.append({
            "name": spec.name,
            "file": path.name,
            "seed": seed,
            "dims": list(vol.dims),
            "landmarks": {t.name: list(lm[t]) for t in TaskId},
            "fnv1a64": f"{file_checksum(path):016x}",
        })
    _dump_json(out / ENV_MANIFEST, {"config": config_mod.as_dict(cfg), "environments": entries})
    atomic_write(out / "config.ini", config_mod.dumps(cfg).encode())
    print(f"wrote {len(entries)} environments to {out}")
    return 0


# --- train ----------------------------------------------------------------------------

def _print_log(record) -> None:
    print(f"{record['epoch']},{record['step']},{record['loss']:.6f},{record['mean_reward']:.6f},"
          f"{record['epsilon']:.6f}", flush=True)


def _save_run(run: RegimeRun, out: Path, prefix: str) -> dict:
    ckpts = []
    for c in run.checkpoints:
        env = run.environments[c.env_index].name
        if c.label == "final":
            stem = "final"
        elif run.regime == "seril":
            stem = f"{c.env_index:02d}-{env}-epoch{c.epoch}"
        else:
            stem = f"epoch{c.epoch}"
        path = out / prefix / f"{stem}.ckpt"
        write_checkpoint(path, c.params)
        ckpts.append({"label": c.label, "environment": env, "env_index": c.env_index, "epoch": c.epoch,
                      "path": str(path.relative_to(out)), "fnv1a64": f"{file_checksum(path):016x}"})
    entry = {
        "environments": [s.name for s in run.environments],
        "checkpoints": ckpts,
        "final": ckpts[-1]["path"],
        "logs": run.logs,
    }
    return entry


def _seril_order(cfg: Config, envs: dict) -> list:
    by_name = {s.name: s for s in envs}
    if cfg.experiment.order:
        try:
            return [by_name[n] for n in cfg.experiment.order]
        except KeyError as e:
            raise ConfigError(f"experiment.order names unknown environment {e.args[0]}") from None
    return sorted(envs, key=lambda s: (s.orientation, s.pathology, s.sequence))


def cmd_train(args) -> int:
    cfg = _effective_config(args, ("experiment", "seed"))
    regime = args.regime or cfg.experiment.regime
    cfg = cfg.replace(experiment={"regime": regime})
    out = Path(args.out)
    envs = load_environments(args.envs)
    if regime == "sert":
        if args.all:
            targets = sorted(envs, key=lambda s: (s.orientation, s.pathology, s.sequence))
        elif args.env:
            by_name = {s.name: s for s in envs}
            for n in args.env:
                EnvironmentSpec.from_name(n)  # validates the name
                if n not in by_name:
                    raise MissingArtifactError(f"{args.envs}: no volume for {n}")
            targets = [by_name[n] for n in args.env]
        else:
            raise ConfigError("sert needs --env NAME or --all")
    print(LOG_HEADER, flush=True)
    runs = []
    if regime == "sert":
        for spec in targets:
            run = train_sert(spec, cfg, envs, on_log=_print_log)
            entry = _save_run(run, out, f"sert/{spec.name}")
            entry["label"] = f"sert:{spec.name}"
            runs.append(entry)
    elif regime == "mert":
        run = train_mert(sorted(envs, key=lambda s: (s.orientation, s.pathology, s.sequence)), cfg, envs,
                         on_log=_print_log)
        entry = _save_run(run, out, "mert")
        entry["label"] = "mert"
        runs.append(entry)
    else:
        run = train_seril(_seril_order(cfg, envs), cfg, envs, on_log=_print_log)
        entry = _save_run(run, out, "seril")
        entry["label"] = "seril"
        store_path = out / "seril" / "store.erb"
        write_store(store_path, run.store, cfg.geometry.history, cfg.geometry.box)
        entry["store"] = str(store_path.relative_to(out))
        runs.append(entry)
    manifest = {"regime": regime, "config": config_mod.as_dict(cfg), "envs_dir": str(Path(args.envs).resolve()),
                "runs": runs}
    _dump_json(out / f"{regime}.run.json", manifest)
    atomic_write(out / f"{regime}.config.ini", config_mod.dumps(cfg).encode())
    return 0


# --- eval -----------------------------------------------------------------------------

def _verified_checkpoint(path: Path, expected: str | None):
    if expected is not None and path.exists() and f"{file_checksum(path):016x}" != expected:
        raise MissingArtifactError(f"{path}: checksum mismatch against run manifest")
    return read_checkpoint(path)


def _eval_targets(args) -> list:
    """(label, params) pairs from --run manifests and --checkpoint paths."""
    targets = []
    for run_path in args.run or []:
        run_path = Path(run_path)
        manifest = _load_json(run_path)
        for entry in manifest["runs"]:
            final = next(c for c in entry["checkpoints"] if c["path"] == entry["final"])
            targets.append((entry["label"], _verified_checkpoint(run_path.parent / final["path"], final["fnv1a64"])))
    for i, path in enumerate(args.checkpoint or []):
        label = args.label[i] if args.label and i < len(args.label) else Path(path).stem
        targets.append((label, _verified_checkpoint(Path(path), None)))
    if not targets:
        raise ConfigError("eval needs --run MANIFEST or --checkpoint PATH")
    return targets


def cmd_eval(args) -> int:
    cfg = _effective_config(args, ("eval", "seed"))
    envs = load_environments(args.envs, args.env)
    seeds = range(cfg.eval.seed, cfg.eval.seed + cfg.eval.episodes)
    records = []
    for label, params in _eval_targets(args):
        records += evaluate(params, envs, TASKS, seeds, cfg, regime=label)
    out = Path(args.out) / args.csv
    atomic_write(out, metrics_csv(records).encode())
    print(f"wrote {len(records)} rows to {out}")
    return 0


# --- report ---------------------------------------------------------------------------

def _forgetting(args, cfg: Config, out: Path) -> None:
    manifest_path = Path(args.run)
    manifest = _load_json(manifest_path)
    if manifest.get("regime") != "seril":
        raise ConfigError(f"{manifest_path}: forgetting matrix needs a seril run manifest")
    entry = manifest["runs"][0]
    envs_dir = args.envs or manifest["envs_dir"]
    envs = load_environments(envs_dir, entry["environments"])
    order = [next(s for s in envs if s.name == n) for n in entry["environments"]]
    run = RegimeRun("seril", order)
    for c in entry["checkpoints"]:
        params = _verified_checkpoint(manifest_path.parent / c["path"], c["fnv1a64"])
        run.checkpoints.append(Checkpoint(c["label"], c["env_index"], c["epoch"], params))
    fm = forgetting_matrix(run, envs, TASKS, args.forgetting_episodes, cfg)
    names = [s.name for s in order]
    lines = ["checkpoint," + ",".join(names)]
    for i, name in enumerate(names):
        lines.append(name + "," + ",".join("" if np.isnan(v) else f"{v:.6f}" for v in fm.F[i]))
    bt = f"{fm.backward_transfer:.6f}" if fm.bt_defined else "undefined"
    lines.append(f"backward_transfer,{bt}")
    atomic_write(out / "forgetting.csv", ("\n".join(lines) + "\n").encode())
    atomic_write(out / "forgetting.svg", heatmap_svg(fm.F, names, "Mean terminal error by checkpoint").encode())


def cmd_report(args) -> int:
    cfg = _effective_config(args, ("eval", "seed"))
    records = []
    for path in args.metrics:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise MissingArtifactError(f"{path}: {e.strerror}") from None
        records += parse_metrics_csv(text, str(path))
    if not records:
        raise ConfigError("metrics CSVs contain no rows")
    out = Path(args.out)
    rows, warnings, degenerate = summary_rows(records, cfg.threshold)
    atomic_write(out / "summary.csv", summary_csv(rows).encode())
    for name, svg in regime_charts(records, cfg.threshold).items():
        atomic_write(out / name, svg.encode())
    if args.run:
        _forgetting(args, cfg, out)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(summary_csv(rows), end="")
    if degenerate:
        raise DegenerateInputError("degenerate t-test input (zero variance of paired differences); outputs written")
    return 0


# --- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="INI config file")
    common.add_argument("--seed", type=int, metavar="U64", default=argparse.SUPPRESS,
                        help="seed for this verb (anatomy for gen, training for train, episodes for eval)")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--threads", type=int, metavar="N", default=argparse.SUPPRESS, help="BLAS thread cap")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="seril", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    sub.add_parser("gen", parents=[common], help="write the 24 synthetic environments")

    t = sub.add_parser("train", parents=[common], help="train one regime")
    t.add_argument("--regime", choices=("sert", "mert", "seril"))
    t.add_argument("--envs", required=True, metavar="DIR", help="directory written by gen")
    t.add_argument("--env", action="append", metavar="NAME", help="SERT environment (repeatable)")
    t.add_argument("--all", action="store_true", help="SERT on every environment")

    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints into a metrics CSV")
    e.add_argument("--envs", required=True, metavar="DIR")
    e.add_argument("--run", action="append", metavar="RUN_JSON", help="evaluate every final model of a run")
    e.add_argument("--checkpoint", action="append", metavar="PATH")
    e.add_argument("--label", action="append", help="regime label per --checkpoint")
    e.add_argument("--env", action="append", metavar="NAME", help="restrict to these environments")
    e.add_argument("--csv", default="metrics.csv", help="output file name inside --out")

    r = sub.add_parser("report", parents=[common], help="summary table and charts")
    r.add_argument("metrics", nargs="+", help="metrics CSV files")
    r.add_argument("--run", metavar="RUN_JSON", help="SERIL run manifest for the forgetting matrix")
    r.add_argument("--envs", metavar="DIR", help="environment directory (defaults to the manifest's)")
    r.add_argument("--forgetting-episodes", type=int, default=10, metavar="N")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "."), ("threads", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                return COMMANDS[args.verb](args)
        return COMMANDS[args.verb](args)
    except DegenerateInputError as e:
        print(f"warning: {e}", file=sys.stderr)
        return e.exit_status
    except SerilError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_status
    except OSError as e:
        print(f"error: {e.filename}: {e.strerror}", file=sys.stderr)
        return MissingArtifactError.exit_status


if __name__ == "__main__":
    sys.exit(main())
