"""Command-line entry point: ``atacnet {synth,train,score,eval,heatmap}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import netpbm
from .config import PRESETS, ConfigError, RunConfig
from .data import DatasetManifest, Sample, generate_synthetic, load_dataset, read_manifest, sample_episode
from .evaluation import ScoredSample, auroc, export_heatmap, histogram_csv, score_histogram
from .loss import deviation
from .model import AtacNet, calibrate_mapper
from .scoring import atac_forward
from .tensor import Tensor, no_grad, strict
from .training import Checkpoint, load_checkpoint, save_checkpoint, score_samples, train, write_log_csv

log = logging.getLogger("atacnet")

SCORE_FIELDS = ("id", "score", "pooled_raw", "pooled_crop", "x0", "y0", "x1", "y1")
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


class UsageError(Exception):
    """Bad invocation: missing paths, inconsistent flags."""


# ---------------------------------------------------------------- helpers
def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = _parse_set(args.set or [])
    for dotted, attr in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = str(value)
    if getattr(args, "strict", None) is not None:
        overrides["run.strict"] = "true" if args.strict else "false"
    text = None
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
    return RunConfig.resolve(args.preset, text, overrides)


# flag attribute per config key; flags override config-file values
_FLAG_KEYS = {
    "run.seed": "seed",
    "run.output_dir": "out",
    "data.train_manifest": "train_manifest",
    "data.anomalies": "anomalies",
    "schedule.epochs": "epochs",
}


def _existing_dir(path: str | Path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"output directory does not exist: {p}")
    return p


def _write_config(cfg: RunConfig, out_dir: Path, command: str) -> Path:
    path = out_dir / f"{command}.ini"
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path


def collect_inputs(path: str | Path) -> DatasetManifest:
    """A manifest file as-is, or every PGM/PPM under a directory (labels unknown, set to 0)."""
    p = Path(path)
    if p.is_file():
        return read_manifest(p)
    if p.is_dir():
        files = sorted(f.relative_to(p).as_posix() for f in p.rglob("*") if f.suffix.lower() in IMAGE_SUFFIXES)
        return DatasetManifest(p, [(f, 0) for f in files], "score")
    raise UsageError(f"input path does not exist: {p}")


def _load_model(path: str | Path) -> tuple[AtacNet, Checkpoint]:
    ckpt = load_checkpoint(path)
    return ckpt.build_model(), ckpt


def _samples_for(model: AtacNet, cfg: RunConfig, input_path: str | Path) -> list[Sample]:
    res = model.config.backbone.input_resolution
    if cfg.get("data.resolution") != res:
        raise UsageError(f"data.resolution is {cfg.get('data.resolution')} but the checkpoint expects {res}")
    manifest = collect_inputs(input_path)
    samples = load_dataset(manifest, res, model.config.backbone.in_channels)
    return sorted(samples, key=lambda s: s.id)


def _stem_for(sample_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", Path(sample_id).with_suffix("").as_posix())


# ---------------------------------------------------------------- commands
def cmd_synth(cfg: RunConfig) -> int:
    out = _existing_dir(cfg.get("run.output_dir"))
    ds = generate_synthetic(cfg.synth_config(), out)
    _write_config(cfg, out, "synth")
    print(ds.root / "train.tsv")
    print(ds.root / "test.tsv")
    return 0


def init_model(cfg: RunConfig, normals: list[Sample]) -> AtacNet:
    """Seeded initialization plus, when enabled, mapper calibration on the normals."""
    model = AtacNet(cfg.model_config(), seed=cfg.get("run.seed"))
    if cfg.get("model.calibrate") and normals:
        batch = np.stack([s.image.transpose(2, 0, 1) for s in normals[:64]])
        calibrate_mapper(model, batch, target_std=cfg.reference().sigma)
    return model


def cmd_train(cfg: RunConfig) -> int:
    out = _existing_dir(cfg.get("run.output_dir"))
    manifest_path = cfg.get("data.train_manifest")
    if not manifest_path:
        raise UsageError("a training manifest is required (--train-manifest or data.train_manifest)")
    if not Path(manifest_path).is_file():
        raise UsageError(f"training manifest not found: {manifest_path}")
    samples = load_dataset(read_manifest(manifest_path), cfg.get("data.resolution"), cfg.get("data.channels"))
    normals = [s for s in samples if s.label == 0]
    anomalies = [s for s in samples if s.label == 1]
    if not normals:
        raise ValueError(f"{manifest_path}: no normal samples")
    seed = cfg.get("run.seed")
    episode = sample_episode(normals, anomalies, cfg.get("data.anomalies"), seed)
    tcfg = cfg.train_config()
    model = init_model(cfg, normals)
    _write_config(cfg, out, "train")
    result = train(model, episode, tcfg, seed=seed)
    ckpt = Checkpoint.capture(model, result.state, seed, result.epoch, {"config": cfg.to_text()})
    save_checkpoint(out / "checkpoint.atac", ckpt)
    write_log_csv(out / "train_log.csv", result.log)
    scores = np.concatenate([o.score.data for o in score_samples(model, episode, tcfg.scoring)]).astype(np.float64)
    labels = np.array([s.label for s in episode])
    mean_n, mean_a = scores[labels == 0].mean(), scores[labels == 1].mean()
    print(f"checkpoint {out / 'checkpoint.atac'}")
    print(f"train separation: anomaly mean {mean_a:.4f} normal mean {mean_n:.4f} gap {mean_a - mean_n:.4f}")
    return 0


def score_rows(model: AtacNet, samples: list[Sample], cfg: RunConfig) -> list[list]:
    rows = []
    outs = score_samples(model, samples, cfg.scoring_config())
    flat = [(o, i) for o in outs for i in range(o.score.shape[0])]
    for sample, (o, i) in zip(samples, flat):
        box = o.boxes[i].as_tuple()
        rows.append(
            [sample.id, repr(float(o.score.data[i])), repr(float(o.pooled_raw.data[i])), repr(float(o.pooled_crop.data[i])), *box]
        )
    return rows


def scores_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_FIELDS)
    w.writerows(sorted(rows, key=lambda r: r[0]))
    return buf.getvalue()


def cmd_score(cfg: RunConfig, checkpoint: str, input_path: str, output: str) -> int:
    out_path = Path(output)
    _existing_dir(out_path.parent)
    model, _ = _load_model(checkpoint)
    samples = _samples_for(model, cfg, input_path)
    out_path.write_text(scores_csv(score_rows(model, samples, cfg)), encoding="utf-8")
    _write_config(cfg, out_path.parent, "score")
    print(out_path)
    return 0


def read_scores(path: str | Path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames or "score" not in reader.fieldnames:
            raise ValueError(f"{path}: expected a CSV with 'id' and 'score' columns")
        scores = {}
        for row in reader:
            if row["id"] in scores:
                raise ValueError(f"{path}: duplicate id {row['id']!r}")
            scores[row["id"]] = float(row["score"])
    return scores


def join_labels(scores: dict[str, float], manifest: DatasetManifest) -> list[ScoredSample]:
    labels = dict(manifest.entries)
    missing = sorted(set(scores) - set(labels))
    unscored = sorted(set(labels) - set(scores))
    if missing or unscored:
        detail = []
        if missing:
            detail.append(f"ids without labels: {', '.join(missing[:5])}")
        if unscored:
            detail.append(f"labels without scores: {', '.join(unscored[:5])}")
        raise ValueError("cannot join scores and labels; " + "; ".join(detail))
    return [ScoredSample(i, labels[i], scores[i]) for i in sorted(scores)]


def write_heatmaps(model: AtacNet, samples: list[Sample], cfg: RunConfig, out_dir: Path) -> list[Path]:
    """Anomaly-map and attention-map overlays per sample; the attention export includes the ω mask."""
    written = []
    scoring = cfg.scoring_config()
    with no_grad():
        for s in samples:
            out = atac_forward(Tensor(s.image.transpose(2, 0, 1)[None]), model, scoring)
            stem = out_dir / _stem_for(s.id)
            written += export_heatmap(out.map_raw.data[0, 0], s.image, f"{stem}_anomaly").values()
            written += export_heatmap(out.attention.values[0], s.image, f"{stem}_attention", omega=scoring.omega).values()
    return written


def cmd_eval(cfg: RunConfig, scores_path: str, labels_path: str, histogram: str | None, bins: int,
             heatmap_dir: str | None, checkpoint: str | None) -> int:
    if not Path(scores_path).is_file():
        raise UsageError(f"scores file not found: {scores_path}")
    if not Path(labels_path).is_file():
        raise UsageError(f"labels manifest not found: {labels_path}")
    if heatmap_dir and not checkpoint:
        raise UsageError("--heatmaps needs --checkpoint")
    manifest = read_manifest(labels_path)
    samples = join_labels(read_scores(scores_path), manifest)
    value = auroc(samples)
    hist_path = Path(histogram) if histogram else Path(scores_path).with_name(Path(scores_path).stem + "_histogram.csv")
    _existing_dir(hist_path.parent)
    hist_path.write_text(histogram_csv(score_histogram(samples, bins)), encoding="utf-8")
    _write_config(cfg, hist_path.parent, "eval")
    print(f"AUROC {value:.4f}")
    print(f"histogram {hist_path}")
    if heatmap_dir:
        model, _ = _load_model(checkpoint)
        res = model.config.backbone.input_resolution
        images = load_dataset(manifest, res, model.config.backbone.in_channels)
        write_heatmaps(model, images, cfg, _existing_dir(heatmap_dir))
    return 0


def cmd_heatmap(cfg: RunConfig, checkpoint: str, input_path: str) -> int:
    out = _existing_dir(cfg.get("run.output_dir"))
    model, _ = _load_model(checkpoint)
    samples = _samples_for(model, cfg, input_path)
    paths = write_heatmaps(model, samples, cfg, out)
    _write_config(cfg, out, "heatmap")
    print(f"{len(paths)} files written to {out}")
    return 0


# ---------------------------------------------------------------- parser
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="config file with [section] key = value lines")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named starting configuration, applied before the file")
    p.add_argument("--seed", type=int, help="run seed (falls back to $ATAC_SEED, then 0)")
    p.add_argument("--out", metavar="DIR", help="output directory (run.output_dir); must exist")
    p.add_argument("--strict", dest="strict", action="store_true", default=None, help="single-threaded, bit-reproducible numerics")
    p.add_argument("--no-strict", dest="strict", action="store_false", help="allow multi-threaded BLAS")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atacnet", description="Attention-cropped anomaly scoring with deviation loss.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic texture/defect dataset")
    _common(p)

    p = sub.add_parser("train", help="train on a manifest and write a checkpoint and log")
    _common(p)
    p.add_argument("--train-manifest", metavar="PATH", help="training manifest (data.train_manifest)")
    p.add_argument("--anomalies", type=int, choices=(1, 10), help="labeled anomalies in the episode (data.anomalies)")
    p.add_argument("--epochs", type=int, help="training epochs (schedule.epochs)")

    p = sub.add_parser("score", help="score images with a checkpoint and write a CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--input", required=True, metavar="PATH", help="manifest file or directory of PGM/PPM images")
    p.add_argument("--output", metavar="CSV", help="scores CSV (default: <out>/scores.csv)")

    p = sub.add_parser("eval", help="AUROC and score histogram from a scores CSV and a labeled manifest")
    _common(p)
    p.add_argument("--scores", required=True, metavar="CSV")
    p.add_argument("--labels", required=True, metavar="PATH", help="manifest with ids and labels")
    p.add_argument("--histogram", metavar="CSV", help="histogram output (default: next to the scores)")
    p.add_argument("--bins", type=int, default=20, help="histogram bins (default 20)")
    p.add_argument("--heatmaps", metavar="DIR", help="also export PGM/PPM heatmaps for the labeled images")
    p.add_argument("--checkpoint", metavar="PATH", help="model used for --heatmaps")

    p = sub.add_parser("heatmap", help="export anomaly and attention heatmaps")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--input", required=True, metavar="PATH", help="manifest file or directory of PGM/PPM images")
    return parser


def _dispatch(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.command == "synth":
        return cmd_synth(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "score":
        output = args.output or str(Path(cfg.get("run.output_dir")) / "scores.csv")
        return cmd_score(cfg, args.checkpoint, args.input, output)
    if args.command == "eval":
        return cmd_eval(cfg, args.scores, args.labels, args.histogram, args.bins, args.heatmaps, args.checkpoint)
    return cmd_heatmap(cfg, args.checkpoint, args.input)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        guard = strict() if cfg.get("run.strict") else contextlib.nullcontext()
        with guard:
            return _dispatch(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"atacnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, netpbm.ImageFormatError) as exc:
        print(f"atacnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
