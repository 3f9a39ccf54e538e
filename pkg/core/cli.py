# core/cli.py
"""
Command-line front-end: synth -> preprocess -> train -> predict -> evaluate,
plus e2e (all of it on phantoms) and about.

Library modules raise CovidCTError subclasses; this module is the only place
that turns them into exit codes (1 for pipeline errors, 2 for usage errors
raised by argparse, 130 on Ctrl+C).
"""
import argparse
import concurrent.futures
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from core import console
from core.augmentation import AugmentationSpec
from core.config import RunConfig, apply_overrides, load_config, save_config
from core.errors import ConfigError, CovidCTError, MissingManifest, MissingPath
from core.evaluation import compute_metrics, render_dataset_summary, render_report, row_label
from core.inference import TTASpec, predict_many
from core.models import Manifest, ManifestEntry, Split
from core.networks import Arch, load_checkpoint
from core.preprocessing import (SliceFilterKind, SliceFilterNet, filter_slices, fuse_channels, load_slice_filter,
                                resize_volume, save_slice_filter, train_slice_filter)
from core.scan_io import (load_scan, read_manifest, read_predictions, read_volume, volume_path,
                          write_predictions, write_volume)
from core.synthetic import generate_dataset
from core.training import Scenario, TrainConfig, samples_from_entries, select_training_pool, train
from core.utils import get_app_path, resolve_work_dir, sha256_file
from core.version import VERSION, VERSION_CODE

PROG = "covidct"
EVAL_SPLITS = (Split.VAL1, Split.TRAIN2, Split.VAL2)


class RunContext:
    """Resolved configuration, work directory and the artifacts a run produced"""

    def __init__(self, command: str, config: RunConfig, work_dir: Path):
        self.command = command
        self.config = config
        self.work_dir = work_dir
        self.artifacts: List[Path] = []

    def out_path(self, value: Optional[str], default: str) -> Path:
        path = Path(value or default)
        return path if path.is_absolute() else self.work_dir / path

    def record(self, *paths: Path):
        self.artifacts.extend(Path(p) for p in paths)

    def write_provenance(self):
        save_config(self.config, self.work_dir / "resolved_config.json")
        entries = []
        for p in self.artifacts:
            if p.is_file():
                entries.append({"path": str(p), "sha256": sha256_file(p)})
            elif p.is_dir():
                entries.append({"path": str(p), "files": sum(1 for f in p.rglob("*") if f.is_file())})
        with open(self.work_dir / "artifacts.json", 'w', encoding='utf-8') as f:
            json.dump({"command": self.command, "version": VERSION, "version_code": VERSION_CODE,
                       "artifacts": entries}, f, indent=2)
            f.write("\n")


def _with_flags(config: RunConfig, flags: Dict[str, Any]) -> RunConfig:
    """Apply command-line flags (skipping unset ones) on top of the config"""
    items = [f"{key}={json.dumps(value)}" for key, value in flags.items() if value is not None]
    return apply_overrides(config, items) if items else config


def _manifest(ctx: RunContext, value: Optional[str]) -> Manifest:
    if value:
        return read_manifest(value)
    if ctx.config.paths.data_root:
        return read_manifest(Path(ctx.config.paths.data_root) / "manifest.csv")
    raise MissingManifest("no manifest given (use --manifest or paths.data_root)")


def _existing_dir(value: Optional[str], what: str) -> Path:
    if not value or not Path(value).is_dir():
        raise MissingPath(f"{what} not found: {value}")
    return Path(value)


def split_list(value: str) -> List[Split]:
    """argparse type: comma-separated split names"""
    splits = []
    for token in (t.strip().lower() for t in value.split(",")):
        if not token:
            continue
        try:
            splits.append(Split(token))
        except ValueError:
            choices = ", ".join(s.value for s in Split)
            raise argparse.ArgumentTypeError(f"unknown split '{token}' (choose from {choices})") from None
    if not splits:
        raise argparse.ArgumentTypeError("no split given")
    return splits


def baseline_scores(value: str) -> Dict[str, float]:
    """argparse type: split=F1 pairs, F1 as a fraction in [0, 1]"""
    out = {}
    for item in value.split(","):
        split, sep, score = item.partition("=")
        try:
            key = Split(split.strip().lower()).value
            f1 = float(score)
        except ValueError:
            raise argparse.ArgumentTypeError(f"baseline entry '{item}' is not split=F1") from None
        if not sep or not 0.0 <= f1 <= 1.0:
            raise argparse.ArgumentTypeError(f"baseline entry '{item}' is not split=F1 with 0 <= F1 <= 1")
        out[key] = f1
    return out


# --- Shared pipeline steps ---

def preprocess_entries(ctx: RunContext, entries: Sequence[ManifestEntry], masks_root: Path, out_dir: Path,
                       filter_model: Optional[SliceFilterNet] = None, max_workers: int = 4) -> int:
    """Load, filter, fuse and resize every entry into <out_dir>/<scan_id>.cvol; returns fallback count"""
    spec = ctx.config.preprocessing
    out_dir.mkdir(parents=True, exist_ok=True)

    def _one(entry: ManifestEntry) -> int:
        scan = load_scan(entry.scan_path, masks_root, scan_id=entry.scan_id)
        kept = filter_slices(scan, spec.filter, model=filter_model)
        volume = resize_volume(fuse_channels(kept), spec.resize, scan_id=entry.scan_id)
        write_volume(volume, volume_path(out_dir, entry.scan_id))
        return int(len(kept.warnings) > len(scan.warnings))

    fallbacks = 0
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = [executor.submit(_one, e) for e in entries]
        with console.progress(total=len(futures), desc="Preprocessing", unit="scan") as pbar:
            for future in concurrent.futures.as_completed(futures):
                fallbacks += future.result()
                pbar.update(1)
    return fallbacks


def _fit_filter(ctx: RunContext, manifest: Manifest, masks_root: Path, out_dir: Path) -> SliceFilterNet:
    scans = [load_scan(e.scan_path, masks_root, scan_id=e.scan_id) for e in manifest.by_split(Split.TRAIN1)]
    model = train_slice_filter(scans, area_threshold=ctx.config.preprocessing.filter.area_threshold,
                               seed=ctx.config.training.seed)
    path = save_slice_filter(model, out_dir / "slice_filter.pt")
    ctx.record(path)
    console.success(f"Slice filter trained on {len(scans)} scans -> {path}")
    return model


def _load_models(paths: Sequence[str]):
    return [load_checkpoint(p.strip()) for p in paths if p.strip()]


def _predict_entries(models, entries: Sequence[ManifestEntry], volumes_dir: Path, tta: Optional[TTASpec]):
    for e in entries:
        if not volume_path(volumes_dir, e.scan_id).is_file():
            raise MissingPath(f"no preprocessed volume for {e.scan_id} in {volumes_dir}")
    volumes = (read_volume(volume_path(volumes_dir, e.scan_id)) for e in entries)
    return predict_many(models, volumes, tta=tta, total=len(entries))


def scored_splits(manifest: Manifest, scenario: Scenario) -> List[Split]:
    """Report splits present in the manifest; train2 is training data under scenario2"""
    return [sp for sp in EVAL_SPLITS if manifest.by_split(sp)
            and not (sp is Split.TRAIN2 and Scenario(scenario) is Scenario.SCENARIO2)]


def _reports(predictions, manifest: Manifest, splits: Sequence[Split], label: str):
    reports = []
    for split in splits:
        report = compute_metrics(predictions, manifest, split)
        report.row_label = row_label(label, report.mode)
        reports.append(report)
    return reports


# --- Subcommands ---

def cmd_synth(ctx: RunContext, args) -> int:
    ctx.config = _with_flags(ctx.config, {
        "synth.n_per_class": args.n_per_class, "synth.seed": args.seed,
        "synth.size": args.size, "synth.domain_shift": args.domain_shift,
    })
    s = ctx.config.synth
    out = ctx.out_path(args.out, "data")
    manifest = generate_dataset(s.n_per_class, s.seed, out, size=s.size, n_slices_range=s.n_slices_range,
                                noise_sigma=s.noise_sigma, domain_shift=s.domain_shift,
                                n_per_class_b=s.n_per_class_b, domain_offset=s.domain_offset)
    console.table(render_dataset_summary(manifest))
    ctx.record(out / "manifest.csv", out / "scans", out / "masks")
    return 0


def cmd_preprocess(ctx: RunContext, args) -> int:
    ctx.config = _with_flags(ctx.config, {
        "preprocessing.filter.kind": args.filter, "preprocessing.filter.model_path": args.filter_model,
        "preprocessing.resize.depth": args.depth, "preprocessing.resize.height": args.height,
        "preprocessing.resize.width": args.width, "paths.masks_root": args.masks_root,
    })
    manifest = _manifest(ctx, args.manifest)
    masks_root = ctx.config.paths.masks_root
    if not masks_root and args.manifest:
        masks_root = str(Path(args.manifest).parent / "masks")  # synth layout
    masks_root = _existing_dir(masks_root, "masks root")
    out = ctx.out_path(args.out, "volumes")
    filter_model = None
    spec = ctx.config.preprocessing.filter
    if spec.kind is SliceFilterKind.LEARNED2D:
        filter_model = load_slice_filter(spec.model_path) if spec.model_path else \
            _fit_filter(ctx, manifest, masks_root, out)
    fallbacks = preprocess_entries(ctx, manifest.entries, masks_root, out, filter_model=filter_model)
    if fallbacks:
        console.warn(f"{fallbacks} scan(s) kept all slices because none passed the filter")
    console.success(f"Wrote {len(manifest.entries)} volumes to {out}")
    ctx.record(out)
    return 0


def cmd_train(ctx: RunContext, args) -> int:
    flags = {
        "training.arch.arch": args.arch, "training.epochs": args.epochs,
        "training.batch_size": args.batch_size, "training.seed": args.seed,
        "training.scenario": args.scenario, "training.arch.width_multiplier": args.width_multiplier,
    }
    if args.pretrained_weights:
        flags.update({"training.arch.pretrained": True, "training.arch.weights_path": args.pretrained_weights})
    ctx.config = _with_flags(ctx.config, flags)
    manifest = _manifest(ctx, args.manifest)
    volumes = _existing_dir(args.volumes or str(ctx.work_dir / "volumes"), "volumes directory")
    cfg: TrainConfig = ctx.config.training
    console.table(render_dataset_summary(manifest))
    train_entries, val_entries = select_training_pool(manifest, cfg.scenario)
    result = train(cfg, samples_from_entries(train_entries, volumes), samples_from_entries(val_entries, volumes),
                   ctx.out_path(args.out, "checkpoints"))
    ckpt = Path(result.checkpoint_path)
    ctx.record(ckpt, ckpt.with_suffix(".json"), Path(result.log_path))
    return 0


def cmd_predict(ctx: RunContext, args) -> int:
    flags = {"tta.n_augmentations": args.tta, "tta.seed": args.seed}
    ctx.config = _with_flags(ctx.config, flags)
    if args.no_augment:
        ctx.config = ctx.config.model_copy(update={
            "tta": ctx.config.tta.model_copy(update={"augmentation": AugmentationSpec.identity()})})
    manifest = _manifest(ctx, args.manifest)
    volumes = _existing_dir(args.volumes or str(ctx.work_dir / "volumes"), "volumes directory")
    models = _load_models(args.checkpoints.split(","))
    entries = manifest.by_split(*args.split)
    tta = ctx.config.tta if args.tta is not None else None
    if tta is not None and tta.n_augmentations == 1 and tta.augmentation.is_identity:
        tta = None  # one unaugmented copy is a single prediction
    records = _predict_entries(models, entries, volumes, tta)
    out = write_predictions(records, ctx.out_path(args.out, "preds.csv"))
    console.success(f"Wrote {len(records)} predictions to {out}")
    ctx.record(out)
    return 0


def cmd_evaluate(ctx: RunContext, args) -> int:
    manifest = _manifest(ctx, args.manifest)
    predictions = read_predictions(args.predictions)
    reports = _reports(predictions, manifest, args.split, args.label)
    baseline = args.baseline
    console.table(render_report(reports, fmt="text", percent=args.percent, baseline=baseline))
    out = ctx.out_path(args.out, "report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, 'w', encoding='utf-8', newline='') as f:
        f.write(render_report(reports, fmt="csv", percent=args.percent, baseline=baseline))
    ctx.record(out)
    return 0


def cmd_e2e(ctx: RunContext, args) -> int:
    flags = {
        "synth.seed": args.seed, "training.seed": args.seed, "tta.seed": args.seed,
        "synth.size": args.size, "preprocessing.resize.height": args.size,
        "preprocessing.resize.width": args.size, "synth.n_per_class": args.n_per_class,
        "training.arch.arch": args.arch, "training.epochs": args.epochs, "tta.n_augmentations": args.tta,
    }
    ctx.config = _with_flags(ctx.config, flags)
    cfg = ctx.config
    s = cfg.synth

    data_dir = ctx.work_dir / "data"
    generate_dataset(s.n_per_class, s.seed, data_dir, size=s.size, n_slices_range=s.n_slices_range,
                     noise_sigma=s.noise_sigma, domain_shift=s.domain_shift,
                     n_per_class_b=s.n_per_class_b, domain_offset=s.domain_offset)
    manifest = read_manifest(data_dir / "manifest.csv")
    console.table(render_dataset_summary(manifest))

    volumes = ctx.work_dir / "volumes"
    filter_model = None
    if cfg.preprocessing.filter.kind is SliceFilterKind.LEARNED2D:
        filter_model = _fit_filter(ctx, manifest, data_dir / "masks", volumes)
    preprocess_entries(ctx, manifest.entries, data_dir / "masks", volumes, filter_model=filter_model)

    train_entries, val_entries = select_training_pool(manifest, cfg.training.scenario)
    result = train(cfg.training, samples_from_entries(train_entries, volumes),
                   samples_from_entries(val_entries, volumes), ctx.work_dir / "checkpoints")
    models = _load_models([result.checkpoint_path])

    splits = scored_splits(manifest, cfg.training.scenario)
    entries = manifest.by_split(*splits, Split.TEST)
    preds = _predict_entries(models, entries, volumes, None)
    preds_tta = _predict_entries(models, entries, volumes, cfg.tta)
    preds_path = write_predictions(preds, ctx.work_dir / "preds.csv")
    tta_path = write_predictions(preds_tta, ctx.work_dir / "preds_tta.csv")

    name = cfg.training.arch.arch.display_name
    reports = _reports(preds, manifest, splits, name) + _reports(preds_tta, manifest, splits, name)
    console.table(render_report(reports, fmt="text"))
    report_path = ctx.work_dir / "report.csv"
    with open(report_path, 'w', encoding='utf-8', newline='') as f:
        f.write(render_report(reports, fmt="csv"))
    ctx.record(data_dir / "manifest.csv", volumes, Path(result.checkpoint_path),
               Path(result.checkpoint_path).with_suffix(".json"), Path(result.log_path),
               preds_path, tta_path, report_path)
    console.success(f"End-to-end run finished in {ctx.work_dir}")
    return 0


def cmd_about(ctx: RunContext, args) -> int:
    print(f"CovidCT-CLI {VERSION}")
    try:
        with open(get_app_path("README_APP.txt"), 'r', encoding='utf-8') as f:
            print(f.read())
    except FileNotFoundError:
        console.warn("README_APP.txt not found")
    return 0


# --- Parser ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (.json or .toml)")
    common.add_argument("--work-dir", help="output directory (default: $COVIDCT_WORKDIR or the user data dir)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug output")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = argparse.ArgumentParser(prog=PROG, description="Covid-19 recognition from CT volumes")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a phantom dataset")
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--out")
    p.add_argument("--domain-shift", action=argparse.BooleanOptionalAction, default=None,
                   help="also write train2/val2 phantoms with shifted intensities")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="filter, fuse and resize scans into volumes")
    p.add_argument("--manifest")
    p.add_argument("--masks-root")
    p.add_argument("--filter", choices=[k.value for k in SliceFilterKind])
    p.add_argument("--filter-model", help="learned2d model (trained on train1 when omitted)")
    p.add_argument("--depth", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--manifest")
    p.add_argument("--volumes")
    p.add_argument("--out")
    p.add_argument("--arch", choices=[a.value for a in Arch])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--scenario", choices=[s.value for s in Scenario])
    p.add_argument("--width-multiplier", type=float)
    p.add_argument("--pretrained-weights")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict with one model or an ensemble")
    p.add_argument("--checkpoints", required=True, help="comma-separated checkpoint files")
    p.add_argument("--manifest")
    p.add_argument("--volumes")
    p.add_argument("--split", type=split_list, default=Split.TEST.value, help="comma-separated splits")
    p.add_argument("--tta", type=int, help="number of test-time augmentations")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-augment", action="store_true", help="disable every TTA transform")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", type=split_list, required=True, help="comma-separated splits")
    p.add_argument("--out")
    p.add_argument("--percent", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--label", default="Model", help="row label")
    p.add_argument("--baseline", type=baseline_scores, help="baseline F1 per split, e.g. val1=0.78,val2=0.73")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("e2e", parents=[common], help="synth -> preprocess -> train -> predict -> evaluate")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--arch", choices=[a.value for a in Arch])
    p.add_argument("--epochs", type=int)
    p.add_argument("--tta", type=int)
    p.set_defaults(handler=cmd_e2e)

    p = sub.add_parser("about", parents=[common], help="version and release notes")
    p.set_defaults(handler=cmd_about)
    return parser


def resolve_config(args) -> RunConfig:
    config = RunConfig.desk_scale() if args.command == "e2e" else RunConfig()
    if args.config:
        config = load_config(args.config, base=config)
    config = apply_overrides(config, args.set)
    if args.quiet:
        config = config.model_copy(update={"verbosity": console.QUIET})
    elif args.verbose:
        config = config.model_copy(update={"verbosity": console.VERBOSE})
    return config


def _fail(ctx: Optional[RunContext], error: CovidCTError) -> int:
    console.error(f"Error [{error.name}]: {error}")
    if ctx is not None:
        ctx.write_provenance()
    return 1


def run_subcommand(args) -> int:
    ctx = None
    try:
        config = resolve_config(args)
        console.set_verbosity(config.verbosity)
        work_dir = resolve_work_dir(args.work_dir, config.paths.work_dir)
        config = config.model_copy(update={"paths": config.paths.model_copy(update={"work_dir": str(work_dir)})})
        ctx = RunContext(args.command, config, work_dir)
        status = args.handler(ctx, args)
        ctx.write_provenance()
        return status
    except ValidationError as e:
        return _fail(ctx, ConfigError(f"invalid value: {e}"))
    except CovidCTError as e:
        return _fail(ctx, e)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run_subcommand(args)
    except KeyboardInterrupt:
        console.warn("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
