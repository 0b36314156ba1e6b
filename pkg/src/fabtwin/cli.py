"""Command-line entry point: ``fabtwin <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure. Every
run that gets past argument validation leaves a ``run.json`` provenance
record next to its output.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .core import (DatasetManifest, ManifestPair, child_seed, load_gray, load_mask, save_gray,
                   save_mask, validate_manifest, write_pair_dataset)
from .evaluation import ALL_METRICS, decompose_uncertainty, evaluate_sets
from .exceptions import FabTwinError, InvalidConfigError, InvalidInputError
from .fab import FabParams, fab_batch, fab_sample
from .networks import (Generator, UNetEnsembleModule, draw_samples, load_checkpoint,
                       save_checkpoint)
from .patterns import STRUCTURE_KINDS, SynthSpec, make_eval_structure, synth_fourier_pattern
from .plotting import plot_loss_curves, render_heatmap
from .training import TrainConfig, train_ensemble, train_genfab, train_unet, write_loss_log

logger = logging.getLogger("fabtwin")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InvalidInputError(f"cannot read {what} {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{what} {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidInputError(f"{what} {path} must hold a JSON object")
    return data


class Run:
    """Collects the provenance of one invocation and writes it as run.json."""

    def __init__(self, subcommand, argv, record_path):
        self.record_path = Path(record_path)
        self.record = {"subcommand": subcommand, "argv": list(argv), "version": __version__,
                       "config": {}, "seeds": {}, "artifacts": {}, "status": "running"}

    def artifact(self, path):
        path = Path(path)
        self.record["artifacts"][path.name] = _sha256(path)
        return path

    def artifacts_in(self, directory):
        for path in sorted(Path(directory).glob("*")):
            if path.is_file() and path.name != "run.json":
                self.artifact(path)

    def finish(self, status, error=None):
        self.record["status"] = status
        if error is not None:
            self.record["error"] = error
        self.record_path.parent.mkdir(parents=True, exist_ok=True)
        self.record_path.write_text(json.dumps(self.record, indent=2, sort_keys=True) + "\n")


def _record_path_for(out, is_dir):
    out = Path(out)
    return out / "run.json" if is_dir else out.with_name(out.name + ".run.json")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_synth(args, run):
    spec_dict = _load_json(args.spec, "spec") if args.spec else {}
    if args.size is not None:
        spec_dict["size"] = args.size
    spec = SynthSpec.from_dict(spec_dict)
    params = FabParams.load(args.params) if args.params else FabParams()
    run.record["config"] = {"spec": spec.to_dict(), "fab": params.to_dict(), "count": args.count}
    run.record["seeds"] = {"seed": args.seed}
    if args.count < 1:
        raise InvalidInputError("--count must be >= 1")
    pairs = []
    for i in range(args.count):
        layout_seed = child_seed(args.seed, "layout", i)
        layout = synth_fourier_pattern(spec, layout_seed)
        fab = fab_sample(layout, params, child_seed(args.seed, "train_fab", i))
        pairs.append((f"pattern{i:05d}", layout_seed, layout, [fab]))
    write_pair_dataset(args.out, pairs)
    run.artifacts_in(args.out)


def cmd_gen_structures(args, run):
    layout = make_eval_structure(args.kind, canvas_px=args.canvas)
    run.record["config"] = {"kind": args.kind, "canvas_px": args.canvas}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mask(out / f"{args.kind}.png", layout)
    DatasetManifest([ManifestPair(f"{args.kind}.png", [], args.kind)]).save(out / "manifest.json")
    run.artifacts_in(out)


def cmd_fab_simulate(args, run):
    params = FabParams.load(args.params) if args.params else FabParams()
    run.record["config"] = {"fab": params.to_dict(), "samples": args.samples,
                            "layout": str(args.layout)}
    run.record["seeds"] = {"seed": args.seed}
    if args.samples < 1:
        raise InvalidInputError("--samples must be >= 1")
    layout = load_mask(args.layout)
    outs = fab_batch(layout, args.samples, params, args.seed)
    write_pair_dataset(args.out, [(Path(args.layout).stem, args.seed, layout, outs)])
    run.artifacts_in(args.out)


def _train_config(args):
    data = _load_json(args.config, "config") if args.config else {}
    for key in ("steps", "seed"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    return TrainConfig.from_dict(data)


def cmd_train(args, run):
    cfg = _train_config(args)
    run.record["config"] = {"model": args.model, "train": cfg.to_dict(), "data": str(args.data)}
    run.record["seeds"] = {"seed": cfg.seed}
    manifest = DatasetManifest.load(args.data)
    run.record["artifacts"]["data_manifest"] = _sha256(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"train_config": cfg.to_dict(), "model": args.model}
    log_path = out.with_name(out.stem + "_loss.csv")
    if args.model == "genfab":
        res = train_genfab(manifest, cfg)
        save_checkpoint(res.model, out, meta)
        write_loss_log(log_path, res.log)
        run.artifact(log_path)
    elif args.model in ("unet", "mcdropout"):
        p = args.dropout if args.model == "mcdropout" else 0.0
        run.record["config"]["dropout_p"] = p
        res = train_unet(manifest, cfg, p)
        save_checkpoint(res.model, out, {**meta, "dropout_p": p})
        write_loss_log(log_path, res.log)
        run.artifact(log_path)
    else:
        run.record["config"]["members"] = args.members
        results = train_ensemble(manifest, cfg, args.members)
        run.record["seeds"]["members"] = [child_seed(cfg.seed, "member", k)
                                          for k in range(args.members)]
        save_checkpoint(UNetEnsembleModule(r.model for r in results), out, meta)
        for k, res in enumerate(results):
            path = out.with_name(f"{out.stem}_loss_m{k}.csv")
            write_loss_log(path, res.log)
            run.artifact(path)
    run.artifact(out)


def _load_model(path):
    if not Path(path).is_file():
        raise InvalidInputError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    return model


def cmd_generate(args, run):
    run.record["config"] = {"ckpt": str(args.ckpt), "layout": str(args.layout),
                            "samples": args.samples}
    run.record["seeds"] = {"seed": args.seed}
    run.record["artifacts"]["ckpt"] = _sha256(args.ckpt) if Path(args.ckpt).is_file() else None
    if args.samples < 1:
        raise InvalidInputError("--samples must be >= 1")
    model = _load_model(args.ckpt)
    layout = load_mask(args.layout)
    outs = draw_samples(model, layout, args.samples, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.layout).stem
    save_mask(out / f"{stem}.png", layout)
    names = []
    for m, img in enumerate(outs):
        names.append(f"{stem}_gen{m:03d}.png")
        save_gray(out / names[-1], img)
    DatasetManifest([ManifestPair(f"{stem}.png", names, stem, args.seed)]).save(
        out / "manifest.json")
    run.artifacts_in(out)


def _read_image_dir(directory, what):
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"{what} directory not found: {directory}")
    manifest_path = directory / "manifest.json"
    structure_id = directory.name
    if manifest_path.is_file():
        manifest = DatasetManifest.load(manifest_path)
        problems = validate_manifest(manifest, require_fabricated=False)
        if problems:
            raise InvalidInputError(f"{what} manifest invalid: " + "; ".join(problems))
        paths = [manifest.resolve(p) for pair in manifest.pairs for p in pair.fabricated_paths]
        if manifest.pairs:
            structure_id = manifest.pairs[0].structure_id
    else:
        paths = sorted(directory.glob("*.png"))
    if not paths:
        raise InvalidInputError(f"{what} directory {directory} contains no images")
    return [load_gray(p) for p in paths], structure_id


def cmd_evaluate(args, run):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    run.record["config"] = {"bins": args.bins, "metrics": metrics, "real": str(args.real),
                            "generated": str(args.generated), "embedder": args.embedder}
    run.record["seeds"] = {"match_random": args.seed}
    unknown = sorted(set(metrics) - set(ALL_METRICS))
    if unknown or not metrics:
        raise InvalidInputError(f"unknown metric(s) {unknown}; choose from {list(ALL_METRICS)}")
    if args.bins < 2:
        raise InvalidInputError("--bins must be >= 2")
    real, structure_id = _read_image_dir(args.real, "real")
    generated, _ = _read_image_dir(args.generated, "generated")
    report = evaluate_sets(generated, real, structure_id, metrics, args.bins, args.seed,
                           args.embedder)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(report.to_json() + "\n")
    run.artifact(args.report)


def cmd_uncertainty(args, run):
    run.record["config"] = {"ckpts": [str(c) for c in args.ckpts], "layout": str(args.layout),
                            "samples": args.samples}
    run.record["seeds"] = {"seed": args.seed}
    if len(args.ckpts) < 2:
        raise InvalidInputError("uncertainty needs at least two checkpoints")
    if args.samples < 1:
        raise InvalidInputError("--samples must be >= 1")
    layout = load_mask(args.layout)
    samples = []
    for path in args.ckpts:
        model = _load_model(path)
        if not isinstance(model, Generator):
            raise InvalidInputError(f"{path} is not a Gen-Fab generator checkpoint")
        samples.append(np.stack(draw_samples(model, layout, args.samples, args.seed)))
    maps = decompose_uncertainty(np.stack(samples))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # one shared scale so the three panels are comparable
    top = float(maps.total.max())
    summary = {}
    for name in ("total", "aleatoric", "epistemic"):
        arr = getattr(maps, name)
        np.save(out / f"{name}.npy", arr)
        render_heatmap(arr, out / f"{name}.png", top if top > 0 else "auto")
        summary[name] = {"mean": float(arr.mean()), "max": float(arr.max())}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run.artifacts_in(out)


def _load_map(path):
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"input not found: {path}")
    if path.suffix == ".npy":
        return np.load(path)
    return load_gray(path)


def cmd_plot(args, run):
    run.record["config"] = {"kind": args.kind, "in": str(args.input), "scale": args.scale}
    if args.kind == "losses":
        if not Path(args.input).is_file():
            raise InvalidInputError(f"loss log not found: {args.input}")
        for path in plot_loss_curves(args.input, args.out):
            run.artifact(path)
    else:
        scale = args.scale
        if scale != "auto":
            try:
                scale = float(scale)
            except ValueError:
                raise InvalidInputError(f"--scale must be 'auto' or a number, got {scale!r}")
        run.artifact(render_heatmap(_load_map(args.input), args.out, scale))


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="fabtwin", description="Fabrication-variation digital twin toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="synthesize layouts").add_subparsers(
        dest="mode", required=True, parser_class=_Parser)
    p = gen.add_parser("synth", help="Fourier patterns plus one virtual-fab outcome each")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--spec", type=Path)
    p.add_argument("--params", type=Path, help="virtual fab parameters (JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_synth, out_is_dir=True)
    p = gen.add_parser("structures", help="evaluation test structures")
    p.add_argument("--kind", choices=STRUCTURE_KINDS, required=True)
    p.add_argument("--canvas", type=int, default=256)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_structures, out_is_dir=True)

    fab = sub.add_parser("fab", help="virtual fabrication").add_subparsers(
        dest="mode", required=True, parser_class=_Parser)
    p = fab.add_parser("simulate")
    p.add_argument("--layout", type=Path, required=True)
    p.add_argument("--params", type=Path)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fab_simulate, out_is_dir=True)

    p = sub.add_parser("train", help="train a model and write a GFCK checkpoint")
    p.add_argument("model", choices=("genfab", "unet", "mcdropout", "ensemble"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--members", type=int, default=5)
    p.add_argument("--dropout", type=float, default=0.1, help="MC dropout rate")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train, out_is_dir=False)

    p = sub.add_parser("generate", help="sample outcomes for a layout")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--layout", type=Path, required=True)
    p.add_argument("--samples", type=int, default=35)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate, out_is_dir=True)

    p = sub.add_parser("evaluate", help="score generated images against real ones")
    p.add_argument("--real", type=Path, required=True)
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--metrics", default=",".join(ALL_METRICS))
    p.add_argument("--embedder", default="avgpool8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate, out_is_dir=False)

    p = sub.add_parser("uncertainty", help="aleatoric/epistemic decomposition")
    p.add_argument("--ckpts", type=Path, nargs="+", required=True)
    p.add_argument("--layout", type=Path, required=True)
    p.add_argument("--samples", type=int, default=35)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_uncertainty, out_is_dir=True)

    p = sub.add_parser("plot", help="loss curves or variance heatmaps")
    p.add_argument("kind", choices=("losses", "heatmap"))
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scale", default="auto", help="heatmap scale: auto or a fixed max")
    p.set_defaults(func=cmd_plot, out_is_dir=False)
    return parser


def _configure_threads():
    raw = os.environ.get("FABTWIN_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfigError(f"FABTWIN_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise InvalidConfigError("FABTWIN_THREADS must be >= 0")
    if n > 0:
        torch.set_num_threads(n)


def run(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        _configure_threads()
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        print("run 'fabtwin --help' for usage", file=sys.stderr)
        return 1
    except FabTwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    name = " ".join(x for x in (args.command, getattr(args, "mode", None),
                                getattr(args, "model", None) or getattr(args, "kind", None)) if x)
    out = args.report if args.command == "evaluate" else args.out
    record = Run(name, argv, _record_path_for(out, args.out_is_dir))
    try:
        args.func(args, record)
    except (FabTwinError, ValueError, FileNotFoundError) as exc:
        code = 2 if isinstance(exc, RuntimeError) else 1
        print(f"error: {exc}", file=sys.stderr)
        record.finish("error", str(exc))
        return code
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        record.finish("error", f"{type(exc).__name__}: {exc}")
        return 2
    record.finish("ok")
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
