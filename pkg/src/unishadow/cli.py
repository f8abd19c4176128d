"""Command line entry points: ``unishadow {train,infer,eval,mask,profile}``.

Exit codes: 0 on success, 1 on a runtime failure (one ``error: <Class>: <message>``
line on stderr), 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, TrainConfig, load_config
from .evaluation import evaluate
from .masking import compute_shadow_mask
from .networks import CriticConfig, GeneratorConfig
from .profiling import comparison_table, profile, read_comparison
from .training import infer, load_checkpoint, load_generator, make_predictor, train

log = logging.getLogger("unishadow")


def _parse_set(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_size(text: str | None) -> tuple[int, int] | None:
    """``WxH`` -> (width, height)."""
    if not text:
        return None
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x48, got {text!r}") from None
    return w, h


def _resolve_config(args):
    overrides = _parse_set(args.set)
    for flag, key in (("seed", "seed"), ("data_root", "data_root"), ("layout", "layout")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "deterministic", None) is not None:
        overrides["deterministic"] = str(args.deterministic)
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return cfg


def _prepare_output(args, extra: dict | None = None) -> Path | None:
    """Create the output directory and record the invocation before any work happens."""
    if not getattr(args, "output_dir", None):
        return None
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = {k: v for k, v in vars(args).items() if k != "func"}
    run.update(extra or {})
    (out / "run_config.json").write_text(json.dumps(run, indent=2, sort_keys=True, default=str) + "\n")
    return out


def _image_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in D.IMAGE_EXTENSIONS)
    if not path.exists():
        raise FileNotFoundError(f"no such input: {path}")
    return [path]


# --- subcommands ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if not cfg.data_root:
        raise ConfigError("no dataset: pass --data-root or set data_root in the config")
    out = _prepare_output(args)
    if out is not None:
        cfg.save(out / "config.cfg")
    log.info("resolved config:\n%s", cfg.dumps())
    manifest = D.load_manifest(cfg.data_root, "train", cfg.layout)
    result = train(cfg, manifest, out, resume=args.resume)
    summary = {"g_steps": result.trainer.g_steps, "d_steps": result.trainer.d_steps,
               "checkpoints": [str(p) for p in result.checkpoints],
               "best": str(result.best) if result.best else None,
               "val_scores": {str(k): v for k, v in result.val_scores.items()}}
    if out is not None:
        (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_infer(args) -> int:
    _prepare_output(args)
    gen = load_generator(args.checkpoint)
    size = _parse_size(args.size)
    inputs = _image_files(Path(args.input))
    target = Path(args.output)
    many = Path(args.input).is_dir()
    if many:
        target.mkdir(parents=True, exist_ok=True)
    for src in inputs:
        rgb = D.read_rgb(src, size)
        out = infer(gen, D.normalize(rgb))
        dest = target / src.name if many else target
        if args.float_output:
            np.save(dest.with_suffix(".npy"), out.numpy().astype(np.float32))
        else:
            D.write_rgb(dest, D.denormalize(out))
        log.info("%s -> %s", src, dest)
    print(f"wrote {len(inputs)} image(s) to {target}")
    return 0


def cmd_eval(args) -> int:
    out = _prepare_output(args)
    manifest = D.load_manifest(args.data_root, args.split, args.layout)
    size = _parse_size(args.size)
    if args.checkpoint:
        report = evaluate(manifest, predict=make_predictor(load_generator(args.checkpoint)), size=size,
                          workers=args.workers)
    else:
        report = evaluate(manifest, pred_dir=args.pred_dir, size=size, workers=args.workers)
    if out is not None:
        report.save(out / "report.json")
    print(report.summary())
    return 0


def cmd_mask(args) -> int:
    _prepare_output(args)
    size = _parse_size(args.size)
    inp = D.normalize(D.read_rgb(args.input, size))
    if args.deshadowed:
        out = D.normalize(D.read_rgb(args.deshadowed, size))
    else:
        out = infer(load_generator(args.checkpoint), inp)
    mask = compute_shadow_mask(inp, out)[0].numpy()
    D.write_rgb(args.output, (mask * 255).astype(np.uint8))
    print(f"shadow fraction {mask.mean():.4f}; mask written to {args.output}")
    return 0


def cmd_profile(args) -> int:
    if args.checkpoint:
        cfg = TrainConfig.from_dict(load_checkpoint(args.checkpoint)["config"])
    else:
        cfg = _resolve_config(args)
    out = _prepare_output(args)
    if out is not None:
        cfg.save(out / "config.cfg")
    w, h = _parse_size(args.resolution)
    gen_cfg: GeneratorConfig = cfg.generator_config()
    critic_cfg: CriticConfig = cfg.critic_config()
    report = profile(gen_cfg, critic_cfg, (h, w), cfg.d_steps_per_g)
    text = json.dumps(report.to_dict(), indent=2)
    print(text)
    if out is not None:
        (out / "profile.json").write_text(text + "\n")
    if args.compare:
        print(comparison_table(report, read_comparison(args.compare)))
    return 0


# --- parser ------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unishadow", description="Self-supervised shadow removal")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a generator/critic pair")
    _add_config_flags(p)
    p.add_argument("--data-root")
    p.add_argument("--layout", choices=D.LAYOUTS)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="de-shadow one image or a folder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--float-output", action="store_true", help="save [-1, 1] floats as .npy instead of 8-bit")
    p.add_argument("--size", help="down-scale inputs to WxH first")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Lab error of predictions against ground truth")
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", default="test", choices=D.SPLITS)
    p.add_argument("--layout", default="istd", choices=D.LAYOUTS)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred-dir", help="predictions named after each shadow image")
    src.add_argument("--checkpoint", help="predict on the fly with this checkpoint")
    p.add_argument("--size", help="evaluate at WxH instead of native resolution")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask", help="Otsu shadow mask from an input and its de-shadowed output")
    p.add_argument("--input", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--deshadowed", help="already de-shadowed image")
    src.add_argument("--checkpoint", help="de-shadow the input with this checkpoint first")
    p.add_argument("--output", required=True)
    p.add_argument("--size")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("profile", help="parameter counts and train-time GFLOPS")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="profile the architecture stored in a checkpoint")
    p.add_argument("--resolution", default="640x480", help="WxH")
    p.add_argument("--compare", help="CSV of other models: name,total_params,train_gflops[,rmse_all]")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports every failure the same way
        log.debug("traceback", exc_info=True)
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
