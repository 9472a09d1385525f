"""Single entry point exposing phantom-gen, augment-preview, train, eval,
score, and the report renderer.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All machine outputs
are deterministic JSON; human-readable tables are derived views of the same
numbers.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

import ulfenc
from ulfenc.augment import AugmentConfig, apply_degrade, apply_geometric, apply_intensity, sample_plan
from ulfenc.metrics import MetricReport, build_report, volume_metrics
from ulfenc.phantom import PhantomConfig, default_contrast_tables, generate_dataset
from ulfenc.trainer import TrainConfig, apply_preset, evaluate, train
from ulfenc.volio import CONTRASTS, DatasetManifest, read_volume, write_volume

log = logging.getLogger("ulfenc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="seed threaded to all randomness")
    p.add_argument("--log-level", choices=("info", "debug"), default="info")


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def render_metrics_table(report: MetricReport) -> str:
    """Aggregate metrics as a markdown table (Value / Value Masked columns)."""
    rows = [("SSIM", "ssim"), ("PSNR", "psnr"), ("MAE", "mae"), ("NMSE", "nmse")]
    lines = ["| Metric | Value | Value Masked |", "| --- | --- | --- |"]
    for label, attr in rows:
        full = getattr(report.aggregate_full, attr)
        masked = getattr(report.aggregate_masked, attr)
        lines.append(f"| {label} | {full:.3f} | {masked:.3f} |")
    lines.append(f"| Score | | {report.score:.3f} |")
    return "\n".join(lines)


def render_ablation(reports: dict[str, MetricReport]) -> str:
    """Markdown table of masked validation SSIM per named report.

    Rows keep the given order; a row named "proposed" is bolded. Requires at
    least two reports.
    """
    if len(reports) < 2:
        raise ValueError("ablation table needs at least two reports")
    lines = ["| Ablation | SSIM |", "| --- | --- |"]
    for name, report in reports.items():
        ssim = report.aggregate_masked.ssim
        if name.lower() == "proposed":
            lines.append(f"| **{name}** | **{ssim:.2f}** |")
        else:
            lines.append(f"| {name} | {ssim:.2f} |")
    return "\n".join(lines)


# ------------------------------------------------------------- subcommands


def _cmd_phantom_gen(args) -> int:
    shape = tuple(int(v) for v in args.shape.split(","))
    if len(shape) != 3:
        raise UsageError("--shape must be D,H,W")
    cfg = PhantomConfig(
        shape=shape,
        n_tissue_classes=args.classes,
        contrast_tables=default_contrast_tables(args.classes),
        lf_noise_sigma=args.noise,
        lf_blur_sigma=tuple(float(v) for v in args.blur.split(",")),
        misreg_max_mm=args.misreg,
        lf_table_jitter=args.table_jitter,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = generate_dataset(cfg, args.subjects, args.out)
    print(Path(args.out) / "manifest.json")
    log.info("wrote %d subjects to %s", len(manifest.entries), args.out)
    return 0


def _cmd_augment_preview(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    sample = manifest.load_sample(args.subject)
    aug = AugmentConfig()
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        doc = {
            **doc,
            **{k: tuple(doc[k]) for k in ("noise_sigma_range", "blur_sigma_range") if k in doc},
        }
        aug = AugmentConfig(**doc)
    seed = args.seed if args.seed is not None else 0
    plan = sample_plan(aug, seed)
    if plan.geometric is not None:
        sample = apply_geometric(sample, plan)
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in CONTRASTS:
        vol = sample.lf[c]
        if plan.intensity is not None:
            vol = apply_intensity(vol, plan.intensity[c])
        if plan.degrade is not None:
            p = plan.degrade[c]
            vol = apply_degrade(vol, p.noise_sigma, p.blur_sigmas, rng=noise_rng)
        write_volume(vol, out / f"{sample.subject_id}_lf_{c}")
        write_volume(sample.hf[c], out / f"{sample.subject_id}_hf_{c}")
    write_volume(sample.mask, out / f"{sample.subject_id}_mask")
    _write_json(out / "plan.json", plan.to_json_dict())
    print(out / "plan.json")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig()
    if args.config:
        cfg = TrainConfig.from_json_dict(json.loads(Path(args.config).read_text()))
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    ckpt = train(args.manifest, cfg, args.out, resume_from=args.resume)
    print(ckpt)
    return 0


def _cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.manifest, split=args.split)
    doc = {
        "version": ulfenc.__version__,
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "report": report.to_json_dict(),
    }
    _write_json(args.out, doc)
    print(render_metrics_table(report))
    return 0


def _cmd_score(args) -> int:
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    mask_dir = Path(args.mask) if args.mask else None
    stems = sorted(p.name[: -len(".vol.json")] for p in pred_dir.glob("*.vol.json"))
    if not stems:
        raise FileNotFoundError(f"no *.vol.json volumes in {pred_dir}")
    entries = []
    for stem in stems:
        pred = read_volume(pred_dir / f"{stem}.vol.json").voxels
        ref_path = ref_dir / f"{stem}.vol.json"
        if not ref_path.exists():
            raise FileNotFoundError(f"reference volume missing for {stem!r}: {ref_path}")
        ref = read_volume(ref_path).voxels
        mask = None
        if mask_dir is not None:
            subject = stem.split("_")[0]
            for cand in (mask_dir / f"{stem}.vol.json", mask_dir / f"{subject}_mask.vol.json"):
                if cand.exists():
                    mask = read_volume(cand).voxels
                    break
        tokens = stem.split("_")
        contrast = tokens[-1] if tokens[-1] in CONTRASTS else ""
        entries.append(volume_metrics(pred, ref, mask=mask, subject_id=tokens[0], contrast=contrast))
    report = build_report(entries)
    _write_json(args.out, {"version": ulfenc.__version__, "report": report.to_json_dict()})
    print(render_metrics_table(report))
    return 0


def _cmd_report(args) -> int:
    reports = {}
    for spec in args.reports:
        if "=" not in spec:
            raise UsageError(f"report argument must be NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        doc = json.loads(Path(path).read_text())
        reports[name] = MetricReport.from_json_dict(doc["report"] if "report" in doc else doc)
    table = render_ablation(reports)
    if args.out:
        Path(args.out).write_text(table + "\n")
    print(table)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="ulfenc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--shape", default="32,32,32")
    p.add_argument("--misreg", type=float, default=PhantomConfig.misreg_max_mm)
    p.add_argument("--noise", type=float, default=PhantomConfig.lf_noise_sigma)
    p.add_argument("--blur", default=",".join(str(v) for v in PhantomConfig.lf_blur_sigma))
    p.add_argument("--classes", type=int, default=PhantomConfig.n_tissue_classes)
    p.add_argument("--table-jitter", type=float, default=PhantomConfig.lf_table_jitter)
    _add_common(p)
    p.set_defaults(func=_cmd_phantom_gen)

    p = sub.add_parser("augment-preview", help="write one augmented sample + its plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with AugmentConfig overrides")
    _add_common(p)
    p.set_defaults(func=_cmd_augment_preview)

    p = sub.add_parser("train", help="train on a manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file mirroring TrainConfig (defaults: see README)")
    p.add_argument("--preset", choices=("none", "a", "b", "c", "d", "e"), default=None,
                   help="ablation preset; a-e mirror the ablation study")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("score", help="score prediction volumes against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("report", help="render an ablation table from reports")
    p.add_argument("reports", nargs="+", metavar="NAME=REPORT.json")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO))
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
