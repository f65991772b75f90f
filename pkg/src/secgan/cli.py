"""secgan command line: train, evaluate, edit, toygen, plot.

Errors are reported as one JSON line on stderr with a nonzero exit code.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .data import (AttributeDataset, DatasetError, ToySpec, generate_toy_dataset, load_attribute_dataset,
                   preprocess, write_dataset)
from .domain import ContractError, save_mask, to_one_hot
from .losses import TrainingDivergence
from .evaluation import (accuracy_breakdown_report, evaluate, load_classifier, make_embedder, make_translator,
                         read_report, save_classifier, to_uint8, train_attribute_classifier, write_report)
from .networks import build_generator, load_network
from .parsing import load_parser, parse
from .training import latest_checkpoint, run_training

log = logging.getLogger("secgan")

RUN_ROOT_ENV = "SECGAN_RUN_ROOT"
EXIT_ERROR = 2


class CommandError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers

def parse_overrides(tokens: list[str]) -> dict:
    """``--key value`` / ``--key=value`` pairs left over by argparse."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override --{key} has no value")
            value = tokens[i + 1]
            i += 2
        out[key] = value
    return out


def default_run_dir(config: ExperimentConfig, name: str) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{Path(name).stem}-{config.variant}-s{config.seed}-{config.hash()}"


def run_config(run_dir: Path) -> ExperimentConfig:
    path = run_dir / "config.yaml"
    if not path.is_file():
        raise CommandError(f"{run_dir} is not a run directory (no config.yaml)")
    return load_config(path)


def write_manifest(run_dir: Path, config: ExperimentConfig) -> Path:
    """Write the run manifest once; a resumed run must carry the same config."""
    path = run_dir / "manifest.json"
    if path.exists():
        existing = json.loads(path.read_text())
        if existing["config_hash"] != config.hash():
            raise CommandError(f"{run_dir} belongs to a different config ({existing['config_hash']})")
        return path
    manifest = {
        "config_hash": config.hash(),
        "code_version": __version__,
        "seed": config.seed,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": config.to_dict(),
        "artifacts": {"config": "config.yaml", "log": "log.csv", "checkpoints": "checkpoints/",
                      "generator": "G_rgb.pt", "semantic_generator": "G_seg.pt", "parser": "parser.pt"},
    }
    run_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_run_generator(run_dir: Path, config: ExperimentConfig, which: str = "rgb") -> torch.nn.Module:
    """Final generator of a run, or the one inside its latest checkpoint."""
    final = run_dir / f"G_{which}.pt"
    if final.is_file():
        return load_network(final)
    ckpt_path = latest_checkpoint(run_dir)
    if ckpt_path is None:
        raise CommandError(f"no generator checkpoint for branch {which!r} in {run_dir}")
    state = torch.load(ckpt_path, map_location="cpu", weights_only=True)
    if state.get(which) is None:
        raise CommandError(f"no generator checkpoint for branch {which!r} in {run_dir}")
    extra = 12 if which == "rgb" and config.variant == "concat" else 0
    G = build_generator(config.backbone, which, config.n_a, config.resolution,
                        extra_in_channels=extra, **config.generator_kwargs())
    G.load_state_dict(state[which]["G"])
    return G


def load_run_parser(run_dir: Path, config: ExperimentConfig):
    path = Path(config.parser_path) if config.parser_path else run_dir / "parser.pt"
    if not path.is_file():
        raise CommandError(f"parser checkpoint not found: {path}")
    return load_parser(path, config.resolution)


def dataset_for(config: ExperimentConfig, data_root: str | None) -> AttributeDataset:
    root = data_root or config.data_root
    if not root:
        raise DatasetError("no dataset: set data_root in the config or pass --data")
    return load_attribute_dataset(root, config.attributes, config.split, config.resolution,
                                  config.crop_size or None)


# --------------------------------------------------------------------------
# commands

def cmd_train(args, extra: list[str]) -> dict:
    config = apply_overrides(load_config(args.config), parse_overrides(extra))
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir(config, args.config)
    config = config.replace(run_dir=str(run_dir))
    if args.resume and not (run_dir / "config.yaml").exists():
        raise CommandError(f"nothing to resume in {run_dir}")
    dataset = dataset_for(config, None)
    write_manifest(run_dir, config)
    state = run_training(config, dataset, resume=True if args.resume else None)
    return {"run_dir": str(run_dir), "step": state.step, "config_hash": config.hash()}


def evaluate_run(run_dir: Path, data_root: str | None = None, classifier_path: str | None = None,
                 embedder: str = "classifier", seed: int = 0, generator=None) -> dict:
    """Metric report for a run; ``generator`` replaces the run's own G when given."""
    config = run_config(run_dir)
    dataset = dataset_for(config, data_root)
    if generator is None:
        generator = load_run_generator(run_dir, config)
        if config.variant == "concat":
            generator = make_translator(generator, load_run_parser(run_dir, config), concat=True)
    reports = run_dir / "reports"
    reports.mkdir(exist_ok=True)
    if classifier_path:
        classifier = load_classifier(classifier_path)
    else:
        cached = reports / "classifier.pt"
        if cached.is_file():
            classifier = load_classifier(cached)
        else:
            classifier = train_attribute_classifier(dataset.image_tensor("train"), dataset.label_tensor("train"),
                                                    dataset.names, seed=seed)
            save_classifier(classifier, cached)
    split = "test" if len(dataset.indices("test")) else "val"
    images, labels = dataset.image_tensor(split), dataset.label_tensor(split)
    protocol = "expression" if config.target_mode == "random-expression" else "reverse"
    result = evaluate(generator, images, labels, classifier, make_embedder(embedder, classifier, seed),
                      dataset.names, method=config.variant, lambda_sc=config.lambda_sc, protocol=protocol,
                      groups=dataset.groups, seed=seed)
    result["classifier_heldout_accuracy"] = classifier.heldout_accuracy
    key = f"{config.hash()}-{embedder}-s{seed}"
    csv_path, json_path = write_report(result, reports, key, {"config_hash": config.hash(), "split": split})
    return {"report": str(csv_path), "summary": str(json_path), "accuracy_mean": result["accuracy_mean"],
            "ssfid_mean": result["ssfid_mean"], "is_mean": result["is_mean"]}


def cmd_evaluate(args, extra) -> dict:
    return evaluate_run(Path(args.run_dir), args.data, args.classifier, args.embedder, args.seed)


def _input_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    else:
        files = [path]
    if not files:
        raise CommandError(f"no input images in {path}")
    return files


def cmd_edit(args, extra) -> dict:
    run_dir = Path(args.run_dir)
    config = run_config(run_dir)
    if args.attribute not in config.attributes:
        raise CommandError(f"unknown attribute {args.attribute!r}; valid: {', '.join(config.attributes)}")
    k = config.attributes.index(args.attribute)
    files = _input_files(Path(args.input))
    x = torch.stack([preprocess(Image.open(f).convert("RGB"), config.resolution, config.crop_size or None)
                     for f in files])
    y_diff = torch.zeros(len(files), config.n_a)
    y_diff[:, k] = float(args.direction)
    G = load_run_generator(run_dir, config, "rgb").eval()
    g_input = x
    if config.variant == "concat":
        g_input = torch.cat([x, to_one_hot(parse(load_run_parser(run_dir, config), x))], dim=1)
    with torch.no_grad():
        x_out = G(g_input, y_diff)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f, img, src in zip(files, to_uint8(x_out), to_uint8(x)):
        path = out / f"{f.stem}_{args.attribute}_{args.direction:+d}.png"
        Image.fromarray(img).save(path)
        written.append(str(path))
        if args.heatmaps:
            diff = np.abs(img.astype(np.int16) - src.astype(np.int16)).mean(axis=2)
            heat = out / f"{f.stem}_{args.attribute}_{args.direction:+d}_diff.png"
            Image.fromarray(np.clip(diff * 255.0 / max(diff.max(), 1), 0, 255).astype(np.uint8)).save(heat)
            written.append(str(heat))
    if args.emit_masks:
        if not (run_dir / "G_seg.pt").is_file():
            raise CommandError(f"--emit-masks needs the semantic generator {run_dir / 'G_seg.pt'}; "
                               f"{len(files)} RGB outputs were written to {out}")
        G_seg = load_network(run_dir / "G_seg.pt").eval()
        parser = load_run_parser(run_dir, config)
        with torch.no_grad():
            s_in = to_one_hot(parse(parser, x))
            s_out = G_seg(s_in, y_diff)
        for f, a, b in zip(files, s_in.argmax(1), s_out.argmax(1)):
            for tag, m in (("mask_in", a), ("mask_out", b)):
                path = out / f"{f.stem}_{args.attribute}_{args.direction:+d}_{tag}.png"
                save_mask(m, path)
                written.append(str(path))
    return {"written": len(written), "out": str(out)}


def cmd_toygen(args, extra) -> dict:
    values = {}
    if args.spec:
        values = yaml.safe_load(Path(args.spec).read_text()) or {}
        known = {f.name for f in fields(ToySpec)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown toy spec key {unknown[0]!r}; valid: {', '.join(sorted(known))}")
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.size is not None:
        values["size"] = args.size
    ds = generate_toy_dataset(ToySpec(**values), args.n)
    out = write_dataset(ds, args.out)
    return {"out": str(out), "n": len(ds), "attributes": ds.names}


def plot_reports(paths: list[str], out_dir: str | Path) -> dict:
    """Per-attribute accuracy bars, plus a lambda_sc sweep curve when reports differ in lambda_sc."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not paths:
        raise CommandError("plot needs at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, sweep = {}, {}
    for p in paths:
        rows = read_report(p)
        per = {r["attribute"]: float(r["accuracy"]) for r in rows if r["attribute"] != "mean"}
        mean = [r for r in rows if r["attribute"] == "mean"]
        if not per or not mean:
            raise CommandError(f"{p}: report has no attribute rows or no mean row")
        label = f"{rows[0]['method']} (lambda_sc={float(rows[0]['lambda_sc']):g})"
        if label in results:
            label = f"{label} [{Path(p).stem}]"
        results[label] = {"per_attribute": per}
        sweep.setdefault(float(rows[0]["lambda_sc"]), []).append(float(mean[0]["accuracy"]))

    table = accuracy_breakdown_report(results)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(table["attributes"])), 3.5))
    width = 0.8 / len(table["methods"])
    xs = np.arange(len(table["attributes"]))
    for i, (method, row) in enumerate(zip(table["methods"], table["table"])):
        ax.bar(xs + i * width, np.asarray(row) * 100, width, label=method)
    ax.set_xticks(xs + width * (len(table["methods"]) - 1) / 2, table["attributes"], rotation=30, ha="right")
    ax.set_ylabel("edit accuracy (%)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    figures = [out / "accuracy_bars.png"]
    fig.savefig(figures[0])
    plt.close(fig)

    curve = sorted((lam, float(np.mean(v))) for lam, v in sweep.items())
    if len(curve) > 1:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([c[0] for c in curve], [c[1] * 100 for c in curve], marker="o")
        ax.set_xlabel("lambda_sc")
        ax.set_ylabel("mean edit accuracy (%)")
        fig.tight_layout()
        figures.append(out / "lambda_sc_sweep.png")
        fig.savefig(figures[-1])
        plt.close(fig)
    (out / "accuracy_table.json").write_text(json.dumps({**table, "sweep": curve}, indent=2))
    return {"figures": [str(f) for f in figures], "bars": len(table["bars"]), "sweep": curve}


def cmd_plot(args, extra) -> dict:
    return plot_reports(args.reports, args.out)


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="secgan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model; extra --key value pairs override the config")
    t.add_argument("config", help="YAML config file or preset name (toy, celeba_stargan, celeba_attgan)")
    t.add_argument("--run-dir", default=None, help=f"run directory (default under ${RUN_ROOT_ENV} or ./runs)")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in the run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="edit accuracy, Frechet distance and IS for a run")
    e.add_argument("run_dir")
    e.add_argument("--data", default=None, help="dataset root (default: the run's data_root)")
    e.add_argument("--classifier", default=None, help="attribute classifier checkpoint")
    e.add_argument("--embedder", choices=("classifier", "random"), default="classifier")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("edit", help="edit one attribute of input images with a trained generator")
    d.add_argument("run_dir")
    d.add_argument("--input", required=True, help="image file or directory")
    d.add_argument("--attribute", required=True)
    d.add_argument("--direction", type=int, choices=(-1, 0, 1), default=1,
                   help="label difference for the attribute: +1 add, -1 remove, 0 reconstruct")
    d.add_argument("--out", required=True)
    d.add_argument("--heatmaps", action="store_true", help="also write |output - input| images")
    d.add_argument("--emit-masks", action="store_true", help="also write masks translated by G_seg")
    d.set_defaults(func=cmd_edit)

    g = sub.add_parser("toygen", help="render the synthetic face dataset")
    g.add_argument("out")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--spec", default=None, help="YAML file of toy-spec fields")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--size", type=int, default=None)
    g.set_defaults(func=cmd_toygen)

    pl = sub.add_parser("plot", help="accuracy bars and lambda_sc sweep from report CSVs")
    pl.add_argument("reports", nargs="+")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command != "train":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = args.func(args, extra)
    except (ConfigError, DatasetError, ContractError, CommandError, TrainingDivergence,
            FileNotFoundError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
