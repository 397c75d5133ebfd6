"""``attxnet`` command line: preprocess, synth, train, evaluate, sweep, export-embeddings.

Exit codes: 0 success, 1 configuration error, 2 input format error,
3 preprocessing error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__, data, dsp
from .errors import ArchiveError, ConfigurationError, NumericalError
from .model import PipelineConfig, build_pipeline, export_embeddings, load_checkpoint, save_checkpoint
from .train_eval import SweepGrid, SweepRow, TrainConfig, loso_evaluate, sweep, train

log = logging.getLogger("attxnet")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_PREPROCESS, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# experiment config files


@dataclass
class ExperimentConfig:
    """One JSON object; unknown keys are rejected before anything runs."""

    dataset: object = None  # archive path, or {"synth": {...}}
    label_scheme: str | None = None
    modalities: list | None = None
    encoder: str = "vgg"
    connection_type: str | None = None
    stages: list = field(default_factory=list)
    loss: str = "cross_entropy"
    focal_alpha: float = 4.0
    focal_gamma: float = 2.0
    fc_widths: list = field(default_factory=lambda: [512, 256])
    width: float = 1.0
    padding: str | None = None
    optimizer: str = "adam"
    lr: float | None = None
    epochs: int = 100
    batch_size: int = 256
    val_fraction: float = 0.2
    selection: str = "best"
    patience: int | None = None
    seed: int = 0
    output: str = "runs/experiment"
    grid: dict | None = None

    GRID_KEYS = ("encoders", "types", "stages", "include_baseline", "budget_seconds")
    SYNTH_KEYS = ("seed", "n_subjects", "segs_per_subject", "coupling")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("experiment config must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self) -> None:
        if self.dataset is None:
            raise ConfigurationError("config needs a 'dataset' (archive path or {'synth': {...}})")
        if isinstance(self.dataset, dict):
            if set(self.dataset) != {"synth"} or not isinstance(self.dataset["synth"], dict):
                raise ConfigurationError("dataset object must be {'synth': {...}}")
            bad = sorted(set(self.dataset["synth"]) - set(self.SYNTH_KEYS))
            if bad:
                raise ConfigurationError(f"unknown synth keys: {bad}")
        elif not isinstance(self.dataset, str):
            raise ConfigurationError("dataset must be a path string or a synth object")
        if self.label_scheme is not None:
            data.get_scheme(self.label_scheme)
        if self.grid is not None:
            bad = sorted(set(self.grid) - set(self.GRID_KEYS))
            if bad:
                raise ConfigurationError(f"unknown grid keys: {bad}")
            self.sweep_grid()
        self.pipeline(self.modalities or ["A", "B"], None, 2, 2560).validate()
        self.train_config().validate()

    def pipeline(self, modalities, channels, num_classes: int, segment_length: int) -> PipelineConfig:
        return PipelineConfig(
            modalities=tuple(modalities),
            encoder=self.encoder,
            attx_stages=frozenset(self.stages),
            connection_type=self.connection_type if self.stages else None,
            fc_widths=tuple(self.fc_widths),
            num_classes=num_classes,
            loss=self.loss,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            seed=self.seed,
            segment_length=segment_length,
            modality_channels=channels,
            width=self.width,
            padding=self.padding,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            lr=self.lr,
            val_fraction=self.val_fraction,
            selection=self.selection,
            patience=self.patience,
            seed=self.seed,
        )

    def sweep_grid(self) -> SweepGrid:
        g = self.grid or {}
        kw = {}
        if "encoders" in g:
            kw["encoders"] = tuple(g["encoders"])
        if "types" in g:
            kw["types"] = tuple(g["types"])
        if "stages" in g:
            kw["stage_sets"] = tuple(tuple(s) for s in g["stages"])
        if "include_baseline" in g:
            kw["include_baseline"] = bool(g["include_baseline"])
        grid = SweepGrid(**kw)
        base = self.pipeline(self.modalities or ["A", "B"], None, 2, 2560)
        for enc, ctype, stages in grid.cells():
            PipelineConfig(**{**base.__dict__, "encoder": enc, "connection_type": ctype, "attx_stages": frozenset(stages)}).validate()
        return grid

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_dataset(cfg: ExperimentConfig) -> data.SegmentDataset:
    if isinstance(cfg.dataset, dict):
        spec = {"seed": cfg.seed, "n_subjects": 6, "segs_per_subject": 100, "coupling": "independent"}
        spec.update(cfg.dataset["synth"])
        return data.synth_generate(**spec)
    return data.load_segments(cfg.dataset)


def resolve_pipeline(cfg: ExperimentConfig, ds: data.SegmentDataset) -> PipelineConfig:
    modalities = cfg.modalities or list(ds.modality_names)
    missing = [m for m in modalities if m not in ds.modality_names]
    if missing:
        raise ConfigurationError(f"dataset lacks modalities {missing}; it has {list(ds.modality_names)}")
    channels = [ds.channels(m) for m in modalities]
    return cfg.pipeline(modalities, channels, ds.num_classes, ds.segment_length).validate()


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig | None, extra: dict) -> None:
    manifest = {"command": command, "version": __version__}
    if cfg is not None:
        manifest.update(config=cfg.to_dict(), config_hash=cfg.hash(), seed=cfg.seed)
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "output", None) is not None:
        cfg.output = args.output
    return cfg


def _prepare(args) -> tuple[ExperimentConfig, data.SegmentDataset, PipelineConfig, Path]:
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    ds = load_dataset(cfg)
    pipe = resolve_pipeline(cfg, ds)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, ds, pipe, out


# --------------------------------------------------------------------------
# commands


def _collect_inputs(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.is_file())
        elif p.exists():
            files.append(p)
        else:
            raise CliError(EXIT_FORMAT, f"{p}: no such file")
    if not files:
        raise CliError(EXIT_FORMAT, "no records: no input files")
    return files


def cmd_preprocess(args) -> int:
    recordings = []
    for path in _collect_inputs(args.inputs):
        try:
            recordings.append(dsp.read_recording(path))
        except dsp.RecordingFormatError as exc:
            raise CliError(EXIT_FORMAT, str(exc)) from None
        except ConfigurationError as exc:
            raise CliError(EXIT_FORMAT, f"{path}: {exc}") from None
    scheme = data.get_scheme(args.profile)
    try:
        ds = data.segment_recordings(
            recordings,
            scheme,
            modalities=args.modalities.split(",") if args.modalities else None,
            window_s=args.window,
            overlap=args.overlap,
        )
    except data.LabelSchemeError as exc:
        raise CliError(EXIT_FORMAT, str(exc)) from None
    except (ConfigurationError, NumericalError, ValueError) as exc:
        raise CliError(EXIT_PREPROCESS, f"preprocessing failed: {exc}") from None
    out = Path(args.output or "segments.seg")
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_segments(ds, out)
    manifest = ds.manifest
    for subject in sorted(manifest["segments_per_subject"]):
        print(
            f"{subject}: {manifest['segments_per_subject'][subject]} segments, "
            f"{manifest['excluded_windows'][subject]} excluded"
        )
    print(f"wrote {len(ds)} segments to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = data.synth_generate(args.seed or 0, args.subjects, args.segments, args.coupling)
    out = Path(args.output or "synth.seg")
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_segments(ds, out)
    print(f"wrote {len(ds)} segments ({len(ds.subjects)} subjects, coupling={args.coupling}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, ds, pipe, out = _prepare(args)
    model = build_pipeline(pipe)
    result = train(model, ds, cfg.train_config())
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_loss"])
        for h in result.history:
            w.writerow([h["epoch"], repr(h["loss"]), repr(h["val_loss"]) if "val_loss" in h else ""])
    save_checkpoint(model, out / "model.ckpt", extra={"config_hash": cfg.hash(), "best_epoch": result.best_epoch})
    _write_manifest(
        out,
        "train",
        cfg,
        {
            "pipeline": pipe.to_dict(),
            "train_subjects": result.train_subjects,
            "val_subjects": result.val_subjects,
            "best_epoch": result.best_epoch,
            "dataset_fingerprint": ds.fingerprint(),
            "dataset_manifest": ds.manifest,
        },
    )
    print(f"trained {len(result.history)} epochs; checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, ds, pipe, out = _prepare(args)
    report = loso_evaluate(pipe, ds, cfg.train_config(), workers=args.workers)
    (out / "report.csv").write_text(report.to_csv())
    _write_manifest(
        out,
        "evaluate",
        cfg,
        {"report": report.to_dict(), "dataset_fingerprint": ds.fingerprint(), "dataset_manifest": ds.manifest},
    )
    print(f"LOSO over {len(report.folds)} subjects: accuracy {report.accuracy:.4f}, macro-F1 {report.macro_f1:.4f}")
    return EXIT_OK


def _row_from_json(d: dict) -> SweepRow:
    return SweepRow(**d)


def cmd_sweep(args) -> int:
    cfg, ds, pipe, out = _prepare(args)
    if cfg.grid is None:
        raise CliError(EXIT_CONFIG, "sweep needs a 'grid' section in the config")
    grid = cfg.sweep_grid()
    cells_path = out / "cells.jsonl"
    completed = {}
    if args.resume and cells_path.exists():
        for line in cells_path.read_text().splitlines():
            if line.strip():
                row = _row_from_json(json.loads(line))
                completed[row.fingerprint] = row
        print(f"resuming: {len(completed)} completed cells")
    elif cells_path.exists():
        cells_path.unlink()

    def record(row: SweepRow):
        with open(cells_path, "a") as fh:
            fh.write(json.dumps(row.__dict__, sort_keys=True) + "\n")
        print(f"{row.encoder:7s} {row.type:12s} {row.stages:10s} acc={row.accuracy:.4f} f1={row.macro_f1:.4f}")

    result = sweep(
        grid,
        ds,
        pipe,
        cfg.train_config(),
        budget_seconds=(cfg.grid or {}).get("budget_seconds"),
        completed=completed,
        workers=args.workers,
        on_row=record,
    )
    (out / "sweep.csv").write_text(result.to_csv(record_time=args.record_time))
    aggregates = {by: result.aggregate(by) for by in ("type", "stages", "encoder")}
    (out / "aggregates.json").write_text(json.dumps(aggregates, indent=2, sort_keys=True) + "\n")
    best = result.best
    if best is not None:
        best_cfg = cfg.to_dict()
        best_cfg.pop("grid")
        best_cfg.update(
            encoder=best.encoder,
            connection_type=None if best.type == "none" else best.type,
            stages=json.loads(best.stages),
        )
        (out / "best_config.json").write_text(json.dumps(best_cfg, indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out,
        "sweep",
        cfg,
        {
            "complete": result.complete,
            "cells": len(grid),
            "rows": len(result.rows),
            "best": best.key if best else None,
            "seconds": {r.key: r.seconds for r in result.rows},
            "dataset_fingerprint": ds.fingerprint(),
            "dataset_manifest": ds.manifest,
        },
    )
    if not result.complete:
        print(f"budget exhausted: {len(result.rows)} of {len(grid)} cells done (table flagged incomplete)")
    if best is not None:
        print(f"best: {best.key} accuracy {best.accuracy:.4f}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    try:
        model, _ = load_checkpoint(args.checkpoint)
        ds = data.load_segments(args.dataset, min_subjects=1)
    except FileNotFoundError as exc:
        raise CliError(EXIT_FORMAT, str(exc)) from None
    out = Path(args.output or "embeddings.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = export_embeddings(model, ds, out)
    print(f"wrote {len(rows)} embeddings of size {model.embedding_size} to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes for folds")
    common.add_argument("--resume", action="store_true", help="reuse completed sweep cells")
    common.add_argument("--output", default=None, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="attxnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="raw recordings -> segment archive")
    p.add_argument("inputs", nargs="+", help="recording files (CSV or packed) or directories of them")
    p.add_argument("--profile", default="wesad-binary", choices=sorted(set(data.SCHEMES) - {"synthetic"}))
    p.add_argument("--modalities", default=None, help="comma-separated subset, e.g. ECG,EDA")
    p.add_argument("--window", type=float, default=10.0, help="window length in seconds")
    p.add_argument("--overlap", type=float, default=0.6, help="window overlap fraction")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", parents=[common], help="synthetic two-modality archive")
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--segments", type=int, default=100, help="segments per subject")
    p.add_argument("--coupling", choices=("independent", "gated"), default="gated")
    p.set_defaults(func=cmd_synth)

    for name, func, text in (
        ("train", cmd_train, "train one model; writes checkpoint and loss curve"),
        ("evaluate", cmd_evaluate, "leave-one-subject-out evaluation report"),
        ("sweep", cmd_sweep, "connection type x stage grid"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("config", help="JSON experiment config")
        if name == "sweep":
            p.add_argument("--record-time", action="store_true", help="fill the seconds column of sweep.csv")
        p.set_defaults(func=func)

    p = sub.add_parser("export-embeddings", parents=[common], help="merged FC vectors per sample as CSV")
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="segment archive")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ArchiveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except dsp.RecordingFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
