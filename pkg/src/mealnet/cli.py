"""Command line: gen-data, train, evaluate, predict, report.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, ImageDraw

from .dataset import (
    FOOD_CLASSES,
    DatasetError,
    GenerationError,
    SceneConfig,
    generate_meal,
    iter_split,
    load_manifest,
    make_splits,
    save_manifest,
    save_sample,
)
from .losses import LossConfig
from .metrics import MetricsError, MetricsReport, evaluate, pr_curve
from .model import ConfigError, ModelConfig
from .model.network import to_input
from .trainer import CheckpointError, DivergenceError, TrainConfig, build_model, load_model, train
from .validation import check_rgb

log = logging.getLogger("mealnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
REGIMES = ("fixed", "free", "full")
SUBSETS = ("train", "val", "test", "all")
MIN_SCENES = 6  # smallest count that fills all three splits at 6:1:1
REFERENCE_SECONDS_PER_IMAGE = 0.2  # reference GPU figure, reported only


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- #
# configuration


@dataclass
class DataSection:
    scenes: int = 80
    train_subset: str = "train"
    eval_subset: str = "test"


@dataclass
class RunConfig:
    """Resolved configuration of one command.

    The file format is a flat YAML mapping of dotted keys, e.g.
    ``train.total_iterations: 3000`` or ``model.fpn_channels: 64``.
    """

    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    SECTIONS = ("data", "scene", "model", "train", "loss")

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        grouped = {s: {} for s in cls.SECTIONS}
        seed = 0
        for key, value in flat.items():
            if key == "seed":
                seed = value
                continue
            section, _, name = str(key).partition(".")
            if section not in grouped or not name:
                raise ConfigError(f"unknown config key {key!r}")
            grouped[section][name] = value
        if "seed" in grouped["train"]:
            raise ConfigError("set the seed with the top-level 'seed' key")
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        try:
            data = _build(DataSection, grouped["data"])
            scene = _build(SceneConfig, grouped["scene"])
            model = ModelConfig.from_dict(grouped["model"])
            train_cfg = TrainConfig.from_dict({**grouped["train"], "seed": seed})
            loss = _build(LossConfig, grouped["loss"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if data.scenes < MIN_SCENES:
            raise ConfigError(f"data.scenes must be >= {MIN_SCENES} to fill train/val/test")
        if data.train_subset not in SUBSETS or data.eval_subset not in SUBSETS:
            raise ConfigError(f"data subsets must be one of {SUBSETS}")
        if scene.resolution != model.input_size:
            raise ConfigError(f"scene.resolution {scene.resolution} != model.input_size {model.input_size}")
        return cls(seed, data, scene, model, train_cfg, loss)

    def to_flat(self) -> dict:
        out = {"seed": self.seed}
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if section == "train" and f.name == "seed":
                    continue
                v = getattr(obj, f.name)
                out[f"{section}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out


def _build(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise UsageError(f"--set expects key=value, got {text!r}")
    return key.strip(), yaml.safe_load(value)


def resolve_config(args) -> RunConfig:
    flat = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a flat key: value mapping")
        flat.update(loaded)
    for item in args.set or []:
        k, v = _parse_override(item)
        flat[k] = v
    if args.seed is not None:
        flat["seed"] = args.seed
    return RunConfig.from_flat(flat)


def echo_config(config: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_flat(), sort_keys=True))


# --------------------------------------------------------------------------- #
# commands


def scene_seed(seed: int, index: int) -> int:
    return seed * 100_003 + index


def cmd_gen_data(config: RunConfig, out: Path) -> int:
    samples_meta = []
    for i in range(config.data.scenes):
        s = scene_seed(config.seed, i)
        try:
            meal = generate_meal(s, config.scene)
        except GenerationError as exc:
            raise GenerationError(f"scene seed {s}: {exc}") from exc
        for sample in meal:
            save_sample(sample, out / sample.name)
            samples_meta.append(sample)
        log.info("scene %d/%d (seed %d)", i + 1, config.data.scenes, s)
    manifest = make_splits(samples_meta, seed=config.seed)
    save_manifest(manifest, out)
    echo_config(config, out)
    print(f"wrote {len(samples_meta)} samples from {config.data.scenes} scenes to {out}")
    return EXIT_OK


def _subset(manifest, subset: str) -> list:
    if subset == "all":
        return manifest.train + manifest.val + manifest.test
    return manifest.split(subset)


def load_subset(dataset: Path, subset: str, regime: str = "full"):
    manifest = load_manifest(dataset)
    names = _subset(manifest, subset)
    tags = manifest.SELECTORS[regime]
    names = [n for n in names if manifest.pose_tags[n] in tags]
    return list(iter_split(dataset, names))


def cmd_train(config: RunConfig, dataset: Path, out: Path, resume: Path | None) -> int:
    samples = load_subset(dataset, config.data.train_subset)
    if not samples:
        raise DatasetError(f"{dataset}: training subset {config.data.train_subset!r} is empty")
    val = load_subset(dataset, "val") if config.train.validate_every else None
    echo_config(config, out)
    model = build_model(config.model, config.seed)
    model.loss_config = config.loss
    try:
        state = train(model, samples, config.train, out_dir=out, resume=resume, val_samples=val)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained {state.iteration} iterations; checkpoint {out / 'last.pt'}")
    return EXIT_OK


def cmd_evaluate(config: RunConfig, checkpoint: Path, dataset: Path, out: Path, regimes) -> int:
    model = load_model(checkpoint).eval()
    manifest = load_manifest(dataset)
    names = _subset(manifest, config.data.eval_subset)
    echo_config(config, out)
    cache = {}  # regimes overlap, so each sample is run once
    for regime in regimes:
        tags = manifest.SELECTORS[regime]
        picked = [n for n in names if manifest.pose_tags[n] in tags]
        if not picked:
            raise DatasetError(f"{dataset}: no {config.data.eval_subset} samples in regime {regime!r}")
        missing = [n for n in picked if n not in cache]
        for n, s in zip(missing, iter_split(dataset, missing)):
            cache[n] = (s, model.forward_infer(to_input(s.rgb))[0])
        samples = [cache[n][0] for n in picked]
        outputs = [cache[n][1] for n in picked]
        report = evaluate(outputs, samples, regime)
        report.save(out / f"report_{regime}.json")
        pred_sets = [o.detections for o in outputs]
        gt_sets = [s.instances for s in samples]
        curves = {}
        for c in range(len(FOOD_CLASSES)):
            r, p = pr_curve(pred_sets, gt_sets, c)
            curves[FOOD_CLASSES[c].name] = {"recall": r.tolist(), "precision": p.tolist()}
        (out / f"pr_{regime}.json").write_text(json.dumps(curves))
        print(
            f"{regime}: n={report.n_images} F_sum={report.f_sum:.2f} F_min={report.f_min:.2f} "
            f"AP50={report.ap50:.2f} AP75={report.ap75:.2f} mAP={report.map:.2f} "
            f"MAD={report.mad_mm:.2f}mm ARD={report.ard_percent:.2f}% APE={report.volume_ape_percent:.2f}% "
            f"time={report.mean_inference_seconds:.3f}s/img (reference GPU {REFERENCE_SECONDS_PER_IMAGE}s)"
        )
    return EXIT_OK


def depth_to_image(values: np.ndarray) -> Image.Image:
    """Grayscale rendering with 0 m black and 1 m white."""
    return Image.fromarray(np.rint(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8), mode="L")


def overlay(rgb: np.ndarray, detections) -> Image.Image:
    base = rgb.astype(np.float64)
    for d in detections:
        color = np.array(FOOD_CLASSES[d.class_id].color, dtype=np.float64)
        base[d.mask] = 0.45 * base[d.mask] + 0.55 * color
    img = Image.fromarray(np.clip(base, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for d in detections:
        x0, y0, x1, y1 = d.bbox
        draw.rectangle([x0, y0, x1, y1], outline=(255, 255, 255))
        draw.text((x0 + 2, y0 + 1), f"{FOOD_CLASSES[d.class_id].name} {d.volume_ml:.0f} mL", fill=(255, 255, 255))
    return img


def cmd_predict(checkpoint: Path, image_path: Path, out: Path) -> int:
    try:
        rgb = np.asarray(Image.open(image_path).convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {image_path}: {exc}") from exc
    model = load_model(checkpoint).eval()
    rgb = check_rgb(rgb, model.config.input_size)
    result = model.forward_infer(to_input(rgb))[0]
    out.mkdir(parents=True, exist_ok=True)
    overlay(rgb, result.detections).save(out / "overlay.png")
    for dm in result.depth_predictions:
        depth_to_image(dm.values).save(out / f"depth_{dm.width}.png")
    doc = {
        "image": str(image_path),
        "inference_seconds": result.inference_seconds,
        "detections": [
            {"class_id": d.class_id, "class_name": FOOD_CLASSES[d.class_id].name, "score": d.score,
             "bbox": list(d.bbox), "area_px": int(d.mask.sum()), "volume_ml": d.volume_ml}
            for d in result.detections
        ],
    }
    (out / "result.json").write_text(json.dumps(doc, indent=1))
    print(f"{len(result.detections)} detections written to {out}")
    return EXIT_OK


def _read_training_log(path: Path) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                int(rec["iteration"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed log record ({exc})") from exc
            records.append(rec)
    return records


def cmd_report(inputs: list, out: Path) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for path in inputs:
        path = Path(path)
        if path.is_dir():
            found = sorted(path.glob("train_log.jsonl")) + sorted(path.glob("report_*.json"))
            if not found:
                raise DatasetError(f"{path}: no training log or reports found")
        else:
            found = [path]
        for p in found:
            if p.name.endswith(".jsonl"):
                records = [r for r in _read_training_log(p) if "objective" in r]
                if not records:
                    raise DatasetError(f"{p}: no loss records")
                it = [r["iteration"] for r in records]
                fig, ax = plt.subplots(figsize=(7, 4))
                for key in ("objective", "cls", "mask", "vol", "depth_3"):
                    ax.plot(it, [r[key] for r in records], label=key, lw=0.8)
                ax.set_yscale("log")
                ax.set_xlabel("iteration")
                ax.set_ylabel("loss")
                ax.legend()
                fig.tight_layout()
                fig.savefig(out / f"loss_{p.parent.name}.png", dpi=120)
                plt.close(fig)
            else:
                try:
                    report = MetricsReport.load(p)
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DatasetError(f"{p}: malformed report ({exc!r})") from exc
                reports.append((p, report))
                _plot_confusion(plt, report, out / f"confusion_{p.parent.name}_{report.regime}.png")
                pr_path = p.with_name(f"pr_{report.regime}.json")
                if pr_path.exists():
                    _plot_pr(plt, json.loads(pr_path.read_text()), out / f"pr_{p.parent.name}_{report.regime}.png")
    if reports:
        cols = ("f_sum", "f_min", "ap50", "ap75", "map", "mad_mm", "ard_percent", "volume_ape_percent",
                "mean_inference_seconds")
        lines = ["| report | regime | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 2)]
        for p, r in reports:
            lines.append(f"| {p} | {r.regime} | " + " | ".join(f"{getattr(r, c):.3f}" for c in cols) + " |")
        (out / "comparison.md").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    print(f"report written to {out}")
    return EXIT_OK


def _plot_confusion(plt, report: MetricsReport, path: Path):
    pct = report.confusion.percentages
    names = list(report.confusion.class_names)
    fig, ax = plt.subplots(figsize=(6.5, 5))
    ax.imshow(pct, cmap="Blues", vmin=0, vmax=100)
    ax.set_xticks(range(len(names) + 1), names + ["missed"], rotation=45, ha="right")
    ax.set_yticks(range(len(names)), [f"{n} (n={int(c)})" for n, c in zip(names, report.confusion.counts.sum(1))])
    for i in range(pct.shape[0]):
        for j in range(pct.shape[1]):
            if pct[i, j] > 0:
                ax.text(j, i, f"{pct[i, j]:.0f}", ha="center", va="center", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_pr(plt, curves: dict, path: Path):
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        if c["recall"]:
            ax.plot(c["recall"], c["precision"], label=name, lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --------------------------------------------------------------------------- #
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mealnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train on a dataset")
    t.add_argument("dataset")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("evaluate", parents=[common], help="score a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=REGIMES, action="append", help="evaluation regime (repeatable; default all)")

    pr = sub.add_parser("predict", parents=[common], help="run on one image")
    pr.add_argument("checkpoint")
    pr.add_argument("image")
    pr.add_argument("--out", required=True)

    r = sub.add_parser("report", parents=[common], help="plots and comparison table")
    r.add_argument("inputs", nargs="+", help="run directories, train_log.jsonl or report_*.json files")
    r.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        config = resolve_config(args)
        out = Path(args.out)
        if args.command == "gen-data":
            return cmd_gen_data(config, out)
        if args.command == "train":
            return cmd_train(config, Path(args.dataset), out, Path(args.resume) if args.resume else None)
        if args.command == "evaluate":
            return cmd_evaluate(config, Path(args.checkpoint), Path(args.dataset), out, args.split or REGIMES)
        if args.command == "predict":
            return cmd_predict(Path(args.checkpoint), Path(args.image), out)
        return cmd_report(args.inputs, out)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, MetricsError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
