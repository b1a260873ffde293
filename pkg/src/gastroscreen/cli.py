"""Command-line entry point.

Subcommands: `gen` (synthetic corpus), `augment` (enhancement preview),
`train` (four ablation modes: baseline, rsgaia, hbbt, rsgaia+hbbt),
`eval` (metrics CSV + overlay PNGs, optional patient-wise k-fold driver),
and `sweep` (slope-parameter table). Exit codes are stable: 0 success,
1 usage error, 2 data error, 3 internal error.

Every subcommand with a fixed --seed is reproducible: artifacts are written
byte-identically; wall-clock timing appears only on stderr log lines.
"""

from __future__ import annotations

import argparse
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from PIL import Image, ImageDraw

from .boxes import HARD_SAMPLE, LESION
from .config import (
    ConfigError,
    build_augment_config,
    build_corpus_spec,
    build_detector_hyper,
    build_eval_settings,
    build_hbbt_config,
    check_known_keys,
    config_hash,
    parse_kv_file,
)
from .detector import (
    CheckpointError,
    InferenceError,
    ReferenceDetector,
    TrainingError,
    load_model,
    save_model,
)
from .evalkit import (
    gamma_sweep,
    metrics_at,
    select_xi,
    split_by_patient,
    write_csv_report,
)
from .hbbt import run_hbbt, save_hard_pool, write_round_log
from .imgcore import GrayImage, read_pgm, read_png, write_pgm, write_png, write_real_field
from .rng import derive_seed
from .rsgaia import (
    augment,
    compose_enhanced,
    edge_strength,
    fold_probability_field,
    make_augmenter,
    sample_fold_mask,
)
from .synthgen import ManifestError, describe_corpus, generate_corpus, load_manifest, load_split

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

MODES = ("baseline", "rsgaia", "hbbt", "rsgaia+hbbt")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


@contextmanager
def _output_lock(out_dir: Path):
    # one writer per output directory
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".gastroscreen.lock"
    try:
        fd = lock.open("x")
    except FileExistsError:
        raise DataError(f"output directory {out_dir} is locked by another run ({lock})")
    try:
        fd.close()
        yield
    finally:
        lock.unlink(missing_ok=True)


def _read_image(path: Path) -> GrayImage:
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    return read_png(path)


def _write_image(path: Path, img: GrayImage) -> None:
    if path.suffix.lower() == ".pgm":
        write_pgm(path, img)
    else:
        write_png(path, img)


def _load_config(path) -> dict[str, str]:
    if path is None:
        return {}
    values = parse_kv_file(path)
    check_known_keys(values)
    return values


def _normalize_mode(mode: str) -> str:
    canon = mode.lower().replace("r-sgaia", "rsgaia")
    if canon not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    return canon


def _pairs(records_images):
    return [(img, list(rec.annotations)) for rec, img in records_images]


def _split_sets(manifest, base_dir):
    train = load_split(manifest, base_dir, "train")
    train_set = _pairs([(r, im) for r, im in train if any(a.class_label == LESION for a in r.annotations)])
    control_set = _pairs([(r, im) for r, im in train if not r.annotations])
    control_ids = [r.path for r, _ in train if not r.annotations]
    train_ids = [r.path for r, _ in train if any(a.class_label == LESION for a in r.annotations)]
    validation = load_split(manifest, base_dir, "validation")
    return train_set, train_ids, control_set, control_ids, _pairs(validation)


def _run_training(mode, aug_cfg, hbbt_cfg, detector, train_set, control_set, validation_set, seed, out_dir=None):
    augmenter = make_augmenter(aug_cfg) if mode in ("rsgaia", "rsgaia+hbbt") else None
    if mode in ("baseline", "rsgaia"):
        hbbt_cfg = replace(hbbt_cfg, max_rounds=1)
    return run_hbbt(
        train_set,
        control_set,
        validation_set,
        detector,
        augmenter=augmenter,
        cfg=hbbt_cfg,
        seed=seed,
        out_dir=out_dir,
        measure_time=False,
    )


# --- subcommands -------------------------------------------------------------


def cmd_gen(args) -> int:
    values = parse_kv_file(args.spec) if args.spec else {}
    spec = build_corpus_spec(values)
    if args.seed is not None:
        spec = replace(spec, master_seed=args.seed)
    out = Path(args.out)
    with _output_lock(out):
        manifest = generate_corpus(spec, out)
    summary = describe_corpus(manifest)
    print(f"images: {summary.images}")
    print(f"patients: {summary.patients}")
    print(f"annotations: {summary.annotations}")
    for split in sorted(summary.per_split):
        print(f"split {split}: {summary.per_split[split]}")
    for bin_name, count in summary.box_side_hist.items():
        print(f"box side {bin_name}: {count}")
    _log(f"corpus written under {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    values = _load_config(args.config)
    cfg = build_augment_config(values)
    img = _read_image(Path(args.input))
    out = Path(args.out)
    n = args.count
    if n < 1:
        raise UsageError("--count must be >= 1")
    multi = n > 1
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    for k in range(n):
        view_seed = derive_seed(args.seed, "view", k)
        result = augment(img, cfg, view_seed)
        target = out / f"augmented_{k:03d}.png" if multi else out
        if not multi:
            target.parent.mkdir(parents=True, exist_ok=True)
        _write_image(target, result)
        if args.dump_intermediates:
            dump = Path(args.dump_intermediates)
            dump.mkdir(parents=True, exist_ok=True)
            from .imgcore import histogram_equalize

            equalized = histogram_equalize(img)
            e = edge_strength(img, cfg)
            p = fold_probability_field(e, cfg)
            mask = sample_fold_mask(p, derive_seed(view_seed, "fold-mask"), cfg)
            write_png(dump / f"equalized_{k:03d}.png", equalized)
            write_real_field(dump / f"edge_strength_{k:03d}.rfld", e)
            write_real_field(dump / f"probability_{k:03d}.rfld", p)
            write_png(dump / f"fold_mask_{k:03d}.png", GrayImage(mask.values.astype("u1") * 255))
    _log(f"wrote {n} augmented image(s) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    mode = _normalize_mode(args.mode)
    values = _load_config(args.config)
    aug_cfg = build_augment_config(values)
    det_hyper = build_detector_hyper(values)
    hbbt_cfg = build_hbbt_config(values)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    train_set, train_ids, control_set, control_ids, validation_set = _split_sets(manifest, base)
    if not train_set:
        raise DataError("train split has no lesion-annotated images")
    if not validation_set:
        raise DataError("manifest has no validation split")
    out = Path(args.out)
    digest = config_hash(values)
    detector = ReferenceDetector(det_hyper)
    with _output_lock(out):
        t0 = time.perf_counter()
        model, state = _run_training(
            mode, aug_cfg, hbbt_cfg, detector, train_set, control_set, validation_set,
            args.seed, out_dir=out / "rounds",
        )
        save_model(model, out / "model.fdet")
        write_round_log(out / "rounds.csv", state.rows, digest)
        ids = train_ids + control_ids
        sizes = [(img.width, img.height) for img, _ in list(train_set) + list(control_set)]
        save_hard_pool(out / "hard_pool.json", ids, sizes, state.hard_pool)
        (out / "config_hash.txt").write_text(digest + "\n", encoding="utf-8")
    best_round, best_f1 = state.best_round, dict(state.f1_history)[state.best_round]
    print(f"mode: {mode}")
    print(f"rounds: {len(state.f1_history)}")
    print(f"best_round: {best_round}")
    print(f"best_validation_f1: {best_f1:.6f}")
    _log(f"training took {time.perf_counter() - t0:.1f}s; artifacts under {out}")
    return EXIT_OK


def _dashed_rectangle(draw: ImageDraw.ImageDraw, box, color, dash=6, gap=4, width=2):
    x1, y1, x2, y2 = box
    edges = [
        ((x1, y1), (x2, y1)),
        ((x2, y1), (x2, y2)),
        ((x2, y2), (x1, y2)),
        ((x1, y2), (x1, y1)),
    ]
    for (sx, sy), (ex, ey) in edges:
        length = max(abs(ex - sx), abs(ey - sy))
        if length == 0:
            continue
        ux, uy = (ex - sx) / length, (ey - sy) / length
        pos = 0
        while pos < length:
            end = min(pos + dash, length)
            draw.line(
                [(sx + ux * pos, sy + uy * pos), (sx + ux * end, sy + uy * end)],
                fill=color,
                width=width,
            )
            pos = end + gap


def _write_overlay(path: Path, img: GrayImage, anns, dets) -> None:
    rgb = Image.fromarray(img.pixels, mode="L").convert("RGB")
    draw = ImageDraw.Draw(rgb)
    for ann in anns:
        b = ann.box
        draw.rectangle([b.x_min, b.y_min, b.x_max - 1, b.y_max - 1], outline=(0, 220, 0), width=2)
    for det in dets:
        b = det.box
        color = (230, 40, 40) if det.class_label == LESION else (160, 160, 160)
        _dashed_rectangle(draw, (b.x_min, b.y_min, b.x_max - 1, b.y_max - 1), color)
        draw.text((b.x_min + 2, max(0, b.y_min - 12)), f"{det.confidence:.2f}", fill=color)
    rgb.save(path, format="PNG")


METRICS_HEADER = ("scope", "images", "tp", "fp", "fn", "precision", "recall", "f1", "xi", "target_met")


def _metrics_row(scope, n_images, report, target_met=""):
    return (
        scope,
        n_images,
        report.tp,
        report.fp,
        report.fn,
        f"{report.precision:.6f}",
        f"{report.recall:.6f}",
        f"{report.f1:.6f}",
        f"{report.xi:.6f}",
        target_met,
    )


def cmd_eval(args) -> int:
    values = _load_config(args.config)
    settings = build_eval_settings(values)
    if args.xi is not None:
        settings = replace(settings, xi=args.xi)
    if args.target_recall is not None:
        settings = replace(settings, target_recall=args.target_recall)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    out = Path(args.out)
    with _output_lock(out):
        if args.kfold:
            return _eval_kfold(args, values, settings, manifest, base, out)
        model = load_model(Path(args.checkpoint))
        detector = ReferenceDetector(model.hyper)
        split = None if args.split == "all" else args.split
        records_images = load_split(manifest, base, split)
        overlays = out / "overlays"
        overlays.mkdir(parents=True, exist_ok=True)
        per_image = []
        t0 = time.perf_counter()
        for rec, img in records_images:
            dets = detector.infer(model, img, 0.0)
            per_image.append(([d for d in dets if d.confidence >= 0.0], list(rec.annotations)))
        elapsed = time.perf_counter() - t0
        rows = []
        if records_images:
            if settings.target_recall is not None:
                selection = select_xi(per_image, settings.target_recall, settings.match_iou)
                report, xi, met = selection.report, selection.xi, selection.target_met
            else:
                xi = settings.xi
                report = metrics_at(per_image, xi, settings.match_iou)
                met = ""
            rows.append(_metrics_row(args.split, len(records_images), report, met))
            for (rec, img), (dets, anns) in zip(records_images, per_image):
                name = rec.path.replace("/", "_").rsplit(".", 1)[0] + "_overlay.png"
                shown = [d for d in dets if d.confidence >= (report.xi)]
                _write_overlay(overlays / name, img, anns, shown)
        write_csv_report(out / "metrics.csv", METRICS_HEADER, rows, config_hash(values))
        if records_images:
            _log(
                f"evaluated {len(records_images)} images in {elapsed:.2f}s "
                f"({elapsed / len(records_images):.3f}s/image)"
            )
    return EXIT_OK


def _eval_kfold(args, values, settings, manifest, base, out: Path) -> int:
    if args.seed is None:
        raise UsageError("--kfold requires --seed for the patient shuffle")
    mode = _normalize_mode(args.mode)
    aug_cfg = build_augment_config(values)
    det_hyper = build_detector_hyper(values)
    hbbt_cfg = build_hbbt_config(values)
    detector = ReferenceDetector(det_hyper)
    fold_split = split_by_patient(manifest, args.kfold, derive_seed(args.seed, "fold-split"))
    all_records = load_split(manifest, base, None)
    rows = []
    totals = []
    for fold in range(args.kfold):
        held = {p for p, f in fold_split.assignments.items() if f == fold}
        train_side = [(r, im) for r, im in all_records if r.patient not in held]
        eval_side = [(r, im) for r, im in all_records if r.patient in held]
        train_set = _pairs([(r, im) for r, im in train_side if any(a.class_label == LESION for a in r.annotations)])
        control_set = _pairs([(r, im) for r, im in train_side if not r.annotations])
        if not train_set:
            raise DataError(f"fold {fold}: no lesion-annotated training images")
        # hbbt stopping needs validation data; borrow the last training patient
        val_patient = sorted({r.patient for r, _ in train_side})[-1]
        validation_set = _pairs([(r, im) for r, im in train_side if r.patient == val_patient])
        model, _ = _run_training(
            mode, aug_cfg, hbbt_cfg, detector, train_set, control_set, validation_set, args.seed
        )
        per_image = [
            (detector.infer(model, im, 0.0), list(r.annotations)) for r, im in eval_side
        ]
        report = metrics_at(per_image, settings.xi, settings.match_iou)
        rows.append(_metrics_row(f"fold{fold}", len(eval_side), report))
        totals.append(report)
    tp = sum(r.tp for r in totals)
    fp = sum(r.fp for r in totals)
    fn = sum(r.fn for r in totals)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision and recall else 0.0
    rows.append(
        (
            "aggregate",
            len(all_records),
            tp,
            fp,
            fn,
            f"{precision:.6f}",
            f"{recall:.6f}",
            f"{f1:.6f}",
            f"{settings.xi:.6f}",
            "",
        )
    )
    write_csv_report(out / "metrics.csv", METRICS_HEADER, rows, config_hash(values))
    print(f"aggregate_f1: {f1:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = _load_config(args.config)
    aug_cfg = build_augment_config(values)
    det_hyper = build_detector_hyper(values)
    settings = build_eval_settings(values)
    try:
        gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    except ValueError:
        raise UsageError(f"--gammas must be a comma-separated number list, got {args.gammas!r}")
    if not gammas:
        raise UsageError("--gammas must name at least one value")
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    train_set, _, _, _, validation_set = _split_sets(manifest, base)
    if not train_set or not validation_set:
        raise DataError("sweep needs lesion-annotated train and validation splits")
    detector = ReferenceDetector(det_hyper)
    out = Path(args.out)
    with _output_lock(out):
        result = gamma_sweep(
            detector, gammas, aug_cfg, train_set, validation_set,
            derive_seed(args.seed, "sweep"), settings.xi, settings.match_iou,
        )
        write_csv_report(
            out / "sweep.csv",
            ("gamma", "precision", "recall", "f1"),
            [
                (f"{r.gamma:g}", f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}")
                for r in result.rows
            ],
            config_hash(values),
        )
    print(f"selected_gamma: {result.best_gamma:g}")
    return EXIT_OK


# --- wiring ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gastroscreen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--spec", help="corpus spec file (key = value)")
    p.add_argument("--seed", type=int, help="override the spec master seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("augment", help="write augmented previews of one image")
    p.add_argument("--config", help="augmentation config file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--in", dest="input", required=True, help="input PNG or PGM image")
    p.add_argument("--out", required=True, help="output image path (or directory with --count > 1)")
    p.add_argument("-n", "--count", type=int, default=1)
    p.add_argument("--dump-intermediates", help="directory for edge/probability/mask dumps")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a detector on a corpus manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="config file")
    p.add_argument("--mode", default="baseline", help="baseline | rsgaia | hbbt | rsgaia+hbbt")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; write metrics CSV and overlays")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--split", default="test", help="train | validation | test | all")
    p.add_argument("--xi", type=float, help="detection threshold")
    p.add_argument("--target-recall", type=float, help="select xi for this recall instead")
    p.add_argument("--kfold", type=int, help="patient-wise k-fold driver (trains k models)")
    p.add_argument("--mode", default="baseline", help="training mode for --kfold")
    p.add_argument("--seed", type=int, help="seed (required for --kfold)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate once per sigmoid slope")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--gammas", required=True, help="comma-separated slope list, e.g. 2,4,8")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "eval" and not args.kfold and not args.checkpoint:
            raise UsageError("eval requires --checkpoint (or --kfold)")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return EXIT_USAGE
    except (
        DataError,
        ConfigError,
        ManifestError,
        CheckpointError,
        TrainingError,
        InferenceError,
        ValueError,
        OSError,
    ) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        import traceback

        traceback.print_exc()
        _log(f"internal error: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
