"""``cliff`` command line: generate, train, eval, compare.

Every failure prints exactly one line to stderr::

    cliff: error[<kind>]: <ExceptionClass>: <message>

and exits with 2 (usage), 3 (data or integrity) or 4 (training/runtime).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
import time
import types
import typing
from pathlib import Path

from . import __version__
from .errors import (
    CheckpointError,
    CliffError,
    CompatibilityError,
    ConfigurationError,
    DataError,
    ParameterError,
    RegistrationError,
)
from .loading import load_model
from .metrics import EvalMatrix, evaluate_sequence, render_comparison, render_table
from .model import HeadConfig
from .synth import MANIFEST_NAME, PROFILES_NAME, dataset_checksum, default_benchmark, load_dataset, save_dataset
from .training import TRAINERS, TrainConfig, write_history
from .vit import VitConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
SEED_ENV = "CLIFF_SEED"
RUN_MANIFEST = "run.json"
EVAL_JSON = "eval.json"
EVAL_TEXT = "eval.txt"
SEQUENTIAL = ("cliff", "naive", "l2p")

# Flat key space: every field of the three config dataclasses is one key.
CONFIG_SECTIONS = {"train": TrainConfig, "vit": VitConfig, "head": HeadConfig}
CONFIG_KEYS = {f.name: section for section, cls in CONFIG_SECTIONS.items() for f in dataclasses.fields(cls)}


class UsageError(CliffError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config ----------------------------------------------------------------------

def _field_type(section: str, key: str):
    hints = typing.get_type_hints(CONFIG_SECTIONS[section])
    return hints[key]


def coerce(section: str, key: str, text: str):
    """Parse ``text`` into the declared type of config field ``key``."""
    tp = _field_type(section, key)
    optional = False
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        optional, tp = True, args[0]
    text = text.strip()
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return tp(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None


def parse_assignment(line: str, origin: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigurationError(f"{origin}: expected key=value, got {line!r}")
    key, value = (part.strip() for part in line.split("=", 1))
    if key not in CONFIG_KEYS:
        raise ConfigurationError(f"{origin}: unknown config key {key!r}")
    return key, value


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc.strerror}") from None
    values: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, f"{path}:{n}")
        if key in values:
            raise ConfigurationError(f"{path}:{n}: duplicate key {key!r}")
        values[key] = value
    return values


@dataclasses.dataclass
class ResolvedConfig:
    train: TrainConfig
    vit: VitConfig
    head: HeadConfig
    sources: dict[str, str]

    def flat(self) -> dict:
        out = {}
        for section in CONFIG_SECTIONS:
            out.update(dataclasses.asdict(getattr(self, section)))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in sorted(self.flat().items()))


def resolve_config(config_file=None, overrides=(), seed=None, env=None) -> ResolvedConfig:
    """Layer built-in defaults < $CLIFF_SEED < config file < command line."""
    env = os.environ if env is None else env
    layers: list[tuple[str, dict[str, str]]] = []
    if env.get(SEED_ENV, "").strip():
        layers.append(("env", {"seed": env[SEED_ENV]}))
    if config_file is not None:
        layers.append(("file", read_config_file(config_file)))
    cli = dict(parse_assignment(item, "--set") for item in overrides)
    if seed is not None:
        cli["seed"] = str(seed)
    layers.append(("cli", cli))

    values: dict[str, dict] = {section: {} for section in CONFIG_SECTIONS}
    sources = {key: "default" for key in CONFIG_KEYS}
    for origin, layer in layers:
        for key, text in layer.items():
            section = CONFIG_KEYS[key]
            values[section][key] = coerce(section, key, text)
            sources[key] = origin
    try:
        built = {section: cls(**values[section]) for section, cls in CONFIG_SECTIONS.items()}
    except ParameterError as exc:
        raise ConfigurationError(str(exc)) from None
    return ResolvedConfig(built["train"], built["vit"], built["head"], sources)


# -- run manifest ------------------------------------------------------------------

def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / RUN_MANIFEST
    if not path.exists():
        raise DataError(f"no run manifest at {path}")
    try:
        return json.loads(path.read_text())
    except ValueError as exc:
        raise DataError(f"unreadable run manifest {path}: {exc}") from None


def _prepare_dir(path: Path, force: bool, owned: list[str]) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} is not empty; pass --force to overwrite")
        for name in owned:
            target = path / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise DataError(f"{path} is not writable")


# -- commands ------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out)
    seed = args.seed if args.seed is not None else resolve_config(env=None).train.seed
    tasks = default_benchmark(seed, n_train=args.n_train, n_val=args.n_val)
    owned = [MANIFEST_NAME, PROFILES_NAME] + [p.name for p in out.glob("task*_*")] if out.is_dir() else []
    _prepare_dir(out, args.force, owned)
    save_dataset(tasks, out, root_seed=seed)
    print(f"wrote {len(tasks)} tasks to {out} (seed {seed}, checksum {dataset_checksum(out)})")
    return EXIT_OK


def _train_kwargs(method: str, cfg: ResolvedConfig, on_step) -> dict:
    kwargs = {"vit_config": cfg.vit, "on_step": on_step}
    if method in ("cliff", "l2p"):
        kwargs["head_config"] = cfg.head
    if method == "cliff":
        kwargs["keep_models"] = False
    return kwargs


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set or (), args.seed)
    tasks = load_dataset(args.data_dir)
    out = Path(args.out)
    _prepare_dir(out, args.force, [RUN_MANIFEST, "config.txt", "history.csv", EVAL_JSON, EVAL_TEXT]
                 + ([p.name for p in out.glob("step_*.clif")] if out.is_dir() else []))

    manifest = {
        "run_id": f"{time.strftime('%Y%m%dT%H%M%S')}-seed{cfg.train.seed}",
        "method": args.method,
        "config": cfg.flat(),
        "config_sources": cfg.sources,
        "material_order": [p.name for p, _ in tasks],
        "data_dir": str(Path(args.data_dir).resolve()),
        "dataset_checksum": dataset_checksum(args.data_dir),
        "checkpoints": [],
        "tool_version": __version__,
        "finalized": False,
    }
    path = out / RUN_MANIFEST
    _write_json_atomic(path, manifest)
    (out / "config.txt").write_text(cfg.to_text())

    def on_step(step, model):
        name = f"step_{step}.clif"
        model.save_checkpoint(out / name)
        manifest["checkpoints"].append(name)
        _write_json_atomic(path, manifest)
        print(f"step {step}: saved {name}", flush=True)

    result = TRAINERS[args.method](tasks, cfg.train, **_train_kwargs(args.method, cfg, on_step))
    write_history(result.history, out / "history.csv")

    missing = [c for c in manifest["checkpoints"] if not (out / c).exists()]
    if missing:
        raise DataError(f"checkpoints vanished before finalize: {missing}")
    manifest["finalized"] = True
    _write_json_atomic(path, manifest)
    print(f"finalized {out}")
    return EXIT_OK


def evaluate_run(run_dir, data_dir=None) -> EvalMatrix:
    run = Path(run_dir)
    manifest = read_manifest(run)
    if not manifest.get("finalized"):
        raise DataError(f"run {run} is not finalized (training incomplete or interrupted)")
    data_dir = data_dir or manifest["data_dir"]
    if dataset_checksum(data_dir) != manifest["dataset_checksum"]:
        raise CompatibilityError(f"dataset at {data_dir} differs from the one {run} was trained on")
    tasks = load_dataset(data_dir)
    names = [p.name for p, _ in tasks]
    if names != manifest["material_order"]:
        raise CompatibilityError(f"dataset materials {names} differ from run materials {manifest['material_order']}")
    models = []
    for step, name in enumerate(manifest["checkpoints"]):
        if not (run / name).exists():
            raise CheckpointError(f"checkpoint for step {step} missing: {run / name}")
        models.append(load_model(run / name))
    expected = 1 if manifest["method"] == "joint" else len(tasks)
    if len(models) != expected:
        raise DataError(f"run {run} has {len(models)} checkpoints, expected {expected}")
    return evaluate_sequence(models, [split.validation for _, split in tasks], names, manifest["method"])


def cmd_eval(args) -> int:
    matrix = evaluate_run(args.run_dir, args.data_dir)
    run = Path(args.run_dir)
    text = render_table([matrix])
    (run / EVAL_JSON).write_text(matrix.to_json())
    (run / EVAL_TEXT).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def load_evaluation(run_dir) -> EvalMatrix:
    path = Path(run_dir) / EVAL_JSON
    if not path.exists():
        raise DataError(f"{run_dir} has no {EVAL_JSON}; run 'cliff eval' first")
    try:
        return EvalMatrix.from_json(path.read_text())
    except (ValueError, KeyError) as exc:
        raise DataError(f"unreadable evaluation {path}: {exc}") from None


def compare_runs(run_dirs) -> tuple[str, str]:
    reports = [load_evaluation(d) for d in run_dirs]
    first = reports[0].task_names
    for d, rep in zip(run_dirs, reports):
        if rep.task_names != first:
            raise CompatibilityError(f"{d} was evaluated on {rep.task_names}, expected {first}")
    return render_comparison(reports)


def cmd_compare(args) -> int:
    text, payload = compare_runs(args.run_dirs)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(text)
        (out / "comparison.json").write_text(payload)
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cliff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cliff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render the synthetic four-material benchmark")
    g.add_argument("--seed", type=int, default=None, help=f"root seed (default: ${SEED_ENV} or 0)")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=300)
    g.add_argument("--n-val", type=int, default=90)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one method over the task sequence")
    t.add_argument("--method", choices=sorted(TRAINERS), required=True)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--config", default=None, help="flat key = value file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="fill the accuracy matrix of a finished run")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--data-dir", default=None, help="defaults to the dataset recorded in the run")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="combine evaluated runs into one table")
    c.add_argument("--run-dirs", nargs="+", required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_compare)
    return parser


def _exit_code(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, (UsageError, ConfigurationError, ParameterError, RegistrationError)):
        return EXIT_USAGE, "usage"
    if isinstance(exc, (DataError, CheckpointError, CompatibilityError, OSError)):
        return EXIT_DATA, "data"
    return EXIT_RUNTIME, "runtime"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except KeyboardInterrupt:
        print("cliff: error[runtime]: KeyboardInterrupt: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        code, kind = _exit_code(exc)
        message = " ".join(str(exc).split())
        print(f"cliff: error[{kind}]: {type(exc).__name__}: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
