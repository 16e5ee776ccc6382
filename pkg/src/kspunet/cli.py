"""Command-line interface: ``kspunet {gen-data,train,sample,eval,inspect-latent}``.

Options may also come from a UTF-8 JSON file given with ``--config``; flags on
the command line win over file values, unknown keys are rejected. Each
command echoes its effective configuration (to ``config.json`` in the output
directory when there is one, otherwise to stderr).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, nnops, punet
from .errors import InvalidConfig, KspunetError
from .shape_space import psi_inverse


class UsageError(Exception):
    pass


def _trunk(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(t) for t in text)
    return tuple(int(t) for t in str(text).split(","))


_MODEL_TYPES = {"trunk_fields": _trunk}

# per command: option name -> (type, default, help)
COMMON = {"seed": (int, 0, "random seed")}
COMMANDS: dict[str, dict] = {
    "gen-data": {
        "out": (str, None, "output dataset directory"),
        "n": (int, 200, "number of samples"),
        "size": (int, 64, "image side length"),
        "annotators": (int, 4, "annotator masks per image"),
        "workers": (int, 1, "generation threads (output does not depend on it)"),
    },
    "train": {
        "data": (str, None, "dataset directory"),
        "out": (str, None, "output directory for model.kspu, train_log.jsonl, config.json"),
    },
    "sample": {
        "checkpoint": (str, None, "model checkpoint"),
        "input": (str, None, "input PGM image(s), comma separated"),
        "n": (int, 5, "samples per input"),
        "out": (str, None, "output directory (default: next to each input)"),
        "kappa": (float, None, "override the predicted concentration"),
    },
    "eval": {
        "checkpoint": (str, None, "model checkpoint"),
        "data": (str, None, "dataset directory"),
        "n": (int, 5, "samples per image"),
        "out": (str, None, "write JSON lines here as well as to stdout"),
    },
    "inspect-latent": {
        "checkpoint": (str, None, "model checkpoint"),
        "input": (str, None, "input PGM image"),
        "out": (str, None, "write the JSON dump here as well as to stdout"),
    },
}
REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "sample": ("checkpoint", "input"),
    "eval": ("checkpoint", "data"),
    "inspect-latent": ("checkpoint", "input"),
}


def _model_options() -> dict:
    out = {}
    for f in dataclasses.fields(punet.ModelConfig):
        if f.name == "seed":
            continue
        default = f.default
        typ = _MODEL_TYPES.get(f.name, type(default))
        out[f.name] = (typ, default, "model/training option")
    return out


def _options(command: str) -> dict:
    opts = {**COMMON, **COMMANDS[command]}
    if command == "train":
        opts.update(_model_options())
    return opts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kspunet", description="Kendall shape probabilistic U-Net")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("-v", "--verbose", action="store_true")
        for name, (typ, default, help_text) in _options(command).items():
            flag = "--" + name.replace("_", "-")
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            p.add_argument(flag, dest=name, type=typ, default=None, help=f"{help_text} (default: {shown})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    opts = _options(command)
    values = {name: option[1] for name, option in opts.items()}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(loaded) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        for key, val in loaded.items():
            typ = opts[key][0]
            try:
                values[key] = None if val is None else typ(val)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
    for name in opts:
        val = getattr(args, name)
        if val is not None:
            values[name] = val
    missing = [n for n in REQUIRED[command] if values.get(n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    for key in ("n", "size", "annotators", "workers"):
        if key in values and values[key] is not None and values[key] < 1:
            raise UsageError(f"--{key} must be >= 1")
    return values


def _echo(values: dict, out_dir: Path | None) -> None:
    text = json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}, indent=2, sort_keys=True)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(text + "\n", encoding="utf-8")
    else:
        print(json.dumps(json.loads(text), sort_keys=True), file=sys.stderr)


def _read_image(path: str) -> np.ndarray:
    return data.read_pgm(path) / 255.0


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(v: dict) -> None:
    out = Path(v["out"])
    ds = data.generate_synthetic(v["n"], v["size"], v["annotators"], v["seed"], workers=v["workers"])
    data.save_dataset(ds, out)
    print(json.dumps({"directory": str(out), "samples": len(ds), "image_size": ds.image_size,
                      "annotators": ds.annotators, "seed": ds.seed}))


def cmd_train(v: dict) -> None:
    model_keys = {f.name for f in dataclasses.fields(punet.ModelConfig)}
    cfg = punet.ModelConfig(**{k: v[k] for k in model_keys})
    ds = data.load_dataset(v["data"])
    _, history = punet.train(ds, cfg, v["out"])
    summary = {"checkpoint": str(Path(v["out"]) / "model.kspu"), "epochs": len(history)}
    if history:
        summary.update(first_loss=history[0]["loss"], final_loss=history[-1]["loss"])
    print(json.dumps(summary))


def cmd_sample(v: dict) -> None:
    model = punet.load_model(v["checkpoint"])
    rng = np.random.default_rng(v["seed"])
    out_dir = Path(v["out"]) if v["out"] else None
    for item in str(v["input"]).split(","):
        src = Path(item)
        masks = punet.sample_segmentations(model, _read_image(item), v["n"], rng, kappa=v["kappa"])
        target = out_dir or src.parent
        target.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(masks):
            path = target / f"{src.stem}_sample{i}.pgm"
            data.write_pgm(path, m * np.uint8(255))
            print(path)


def cmd_eval(v: dict) -> None:
    model = punet.load_model(v["checkpoint"])
    ds = data.load_dataset(v["data"])
    rows, agg = punet.evaluate(ds, model, v["n"], np.random.default_rng(v["seed"]))
    lines = [json.dumps(r) for r in rows] + [json.dumps(agg)]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if v["out"]:
        Path(v["out"]).write_text(text, encoding="utf-8")


def cmd_inspect_latent(v: dict) -> None:
    model = punet.load_model(v["checkpoint"])
    lat = punet.latent_distribution(model, _read_image(v["input"]))
    params = lat.params(0)
    landmarks = psi_inverse(params.mu, model.cfg.k, model.cfg.m)
    dump = {
        "input": v["input"],
        "mu": params.mu.tolist(),
        "mu_norm": float(np.linalg.norm(params.mu)),
        "kappa": params.kappa,
        "angle": float(lat.angle[0]),
        "landmarks": landmarks.tolist(),
    }
    text = json.dumps(dump)
    print(text)
    if v["out"]:
        Path(v["out"]).write_text(text + "\n", encoding="utf-8")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "inspect-latent": cmd_inspect_latent,
}
ECHO_DIR = {"gen-data": "out", "train": "out", "sample": "out"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on malformed flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(args.command, args)
        if args.command == "train":
            punet.ModelConfig(**{f.name: values[f.name] for f in dataclasses.fields(punet.ModelConfig)})
    except (UsageError, InvalidConfig, TypeError) as exc:
        parser.error(f"{args.command}: {exc}")
    try:
        threads = int(os.environ.get("KSPU_THREADS", "1"))
    except ValueError:
        parser.error("KSPU_THREADS must be an integer")
    nnops.configure_determinism(max(1, threads))
    key = ECHO_DIR.get(args.command)
    try:
        _echo(values, Path(values[key]) if key and values.get(key) else None)
        HANDLERS[args.command](values)
    except (KspunetError, OSError, ValueError, FloatingPointError) as exc:
        print(f"kspunet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
