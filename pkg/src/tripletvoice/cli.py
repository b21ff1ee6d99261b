"""Command-line entry point: ``tripletvoice <subcommand> ...``.

Exit status is 0 on success, 1 for invalid arguments or configuration and 2
for failures while running.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .audio_io import DEFAULT_PRE_EMPHASIS, write_wav
from .dataset import (
    apply_split,
    filter_manifest,
    load_manifest,
    parse_filter_expr,
    split_speakers,
    synth_meta,
    synth_speaker_clip,
    write_manifest,
)
from .errors import TripletVoiceError
from .evalrep import (
    HIGHER,
    LOWER,
    ScoreSet,
    det_curve,
    histogram,
    project_2d,
    roc_curve,
    summarize,
    write_det_csv,
    write_histogram_csv,
    write_projection_csv,
    write_roc_csv,
)
from .forensic import (
    CalibrationConstant,
    ForensicCase,
    Recording,
    build_cases,
    calibrate_N,
    read_scores_csv,
    score_case,
    write_scores_csv,
)
from .net import NetConfig, build, load_checkpoint
from .pipeline import (
    embed_records,
    grouped,
    labels_path,
    manifest_patches,
    read_patch_labels,
    read_sidecar,
    spec_from_dict,
    write_patch_labels,
    write_sidecar,
)
from .quality import LabeledEmbeddingSet, compute_quality
from .spectrogram import SpectrogramConfig, read_patch_tensor, write_patch_tensor
from .triplet import BatchSampler, TrainConfig, train, write_trace_csv

log = logging.getLogger("tripletvoice")

TRAIN_KEYS = {
    "steps": int,
    "margin": float,
    "mining": str,
    "speakers_per_batch": int,
    "patches_per_speaker": int,
    "max_seconds": float,
    "learning_rate": float,
    "optimizer": str,
    "momentum": float,
    "checkpoint_every": int,
}
TRAIN_DEFAULTS = {
    "steps": 500,
    "margin": 2.0,
    "mining": "semi_hard",
    "speakers_per_batch": 8,
    "patches_per_speaker": 4,
    "max_seconds": None,
    "learning_rate": 1e-3,
    "optimizer": "sgd",
    "momentum": 0.9,
    "checkpoint_every": 0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _header(args, **extra):
    # worker count and log level never change results, so they stay out of the audit header
    d = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "workers", "log_level")}
    d["tool"] = f"tripletvoice {__version__}"
    d.update(extra)
    return d


def _log_config(header):
    log.info("resolved config: %s", json.dumps(header, sort_keys=True))


def _select(manifest, split, filters):
    if split:
        missing = [r.path for r in manifest.records if r.split is None]
        if missing:
            raise UsageError(f"--split {split} needs a manifest with split fields; run 'dataset split'")
        manifest = filter_manifest(manifest, split=split)
    criteria = {}
    for expr in filters or []:
        try:
            key, value = parse_filter_expr(expr)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        criteria[key] = value
    try:
        return filter_manifest(manifest, **criteria)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _spec_from_args(args):
    try:
        return SpectrogramConfig(t_ms=args.t_ms, w_ms=args.w_ms, h_ms=args.h_ms, f_max_hz=args.f_max_hz)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _workers(args):
    if getattr(args, "workers", None):
        return args.workers
    return int(os.environ.get("TRIPLETVOICE_WORKERS", "1"))


def _load_model(path):
    net = load_checkpoint(path)
    side = read_sidecar(path)
    return net, side, spec_from_dict(side["spectrogram"])


# -- dataset -------------------------------------------------------------------

def cmd_dataset_synth(args):
    if args.speakers < 1 or args.utterances < 1:
        raise UsageError("--speakers and --utterances must be positive")
    if args.duration < 2.5:
        raise UsageError("--duration must be at least 2.5 s")
    header = _header(args)
    _log_config(header)
    wav_dir = os.path.join(args.out, "wav")
    os.makedirs(wav_dir, exist_ok=True)
    records = []
    for s in range(args.speakers):
        spk_seed = args.seed * 1000 + s
        for u in range(args.utterances):
            clip = synth_speaker_clip(spk_seed, u, args.duration)
            rel = f"wav/{clip.source_id}.wav"
            write_wav(os.path.join(args.out, rel), clip)
            records.append(synth_meta(spk_seed, u, args.duration, rel))
    write_manifest(os.path.join(args.out, "manifest.jsonl"), records, header)
    print(f"wrote {len(records)} recordings to {args.out}")


def cmd_dataset_split(args):
    fractions = tuple(args.fractions)
    header = _header(args)
    _log_config(header)
    manifest = load_manifest(args.manifest)
    try:
        assignment = split_speakers(manifest, fractions, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    split = apply_split(manifest, assignment)
    # keep relative audio paths valid from the new manifest's directory
    out_dir = os.path.dirname(os.path.abspath(args.out))
    records = [
        r if os.path.isabs(r.path) else replace(r, path=os.path.relpath(manifest.resolve(r), out_dir))
        for r in split.records
    ]
    write_manifest(args.out, records, header)
    counts = {name: sum(1 for v in assignment.values() if v == name) for name in ("train", "validation", "test")}
    print(json.dumps(counts, sort_keys=True))


# -- preprocess / train ----------------------------------------------------------

def cmd_preprocess(args):
    spec = _spec_from_args(args)
    manifest = _select(load_manifest(args.manifest), args.split, args.filter)
    if not manifest.records:
        raise UsageError("selection is empty")
    header = _header(args, spectrogram=spec.as_dict(), width=spec.width)
    _log_config(header)
    per_record = manifest_patches(
        manifest, manifest.records, spec, args.per_recording, args.seed, _workers(args), args.pre_emphasis
    )
    patches = [p for group in per_record for p in group]
    write_patch_tensor(args.out, patches)
    write_patch_labels(labels_path(args.out), patches, header)
    print(f"wrote {len(patches)} patches of {spec.width}x256 to {args.out}")


def _train_options(args):
    opts = dict(TRAIN_DEFAULTS)
    if args.config:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(args.config, "rb") as fh:
            loaded = tomllib.load(fh)
        unknown = set(loaded) - set(TRAIN_KEYS)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        opts.update(loaded)
    for key in TRAIN_KEYS:
        value = getattr(args, key)
        if value is not None:
            opts[key] = value
    return opts


def cmd_train(args):
    opts = _train_options(args)
    label_header, rows = read_patch_labels(labels_path(args.patches))
    if "spectrogram" not in label_header:
        raise UsageError(f"{args.patches}: labels sidecar lacks the spectrogram config")
    spec = spec_from_dict(label_header["spectrogram"])
    try:
        net_cfg = NetConfig(
            input_width=spec.width,
            learning_rate=opts["learning_rate"],
            optimizer=opts["optimizer"],
            momentum=opts["momentum"],
            init_seed=args.init_seed,
        )
        train_cfg = TrainConfig(
            margin=opts["margin"],
            speakers_per_batch=opts["speakers_per_batch"],
            patches_per_speaker=opts["patches_per_speaker"],
            steps=opts["steps"],
            max_seconds=opts["max_seconds"],
            mining=opts["mining"],
            seed=args.seed,
            checkpoint_every=opts["checkpoint_every"],
        )
    except (ValueError, TripletVoiceError) as exc:
        raise UsageError(str(exc)) from exc
    header = _header(args, resolved=opts, net=net_cfg.to_dict(), spectrogram=spec.as_dict())
    _log_config(header)

    data = read_patch_tensor(args.patches)
    if data.shape[0] != len(rows):
        raise TripletVoiceError(f"{args.patches}: {data.shape[0]} patches but {len(rows)} labels")
    pools = {}
    for row, patch in zip(rows, data):
        pools.setdefault(row["speaker_id"], []).append(patch)
    pools = {k: np.stack(v) for k, v in pools.items()}

    net = build(net_cfg)
    sampler = BatchSampler(pools, train_cfg.speakers_per_batch, train_cfg.patches_per_speaker, seed=args.seed)
    result = train(net, sampler, train_cfg, checkpoint_path=args.out)
    write_trace_csv(args.trace, result.trace, header=json.dumps(header, sort_keys=True))

    cal = calibrate_N({k: net.embed(v).astype(np.float64) for k, v in pools.items()},
                      provenance=f"training patches in {os.path.basename(args.patches)}")
    write_sidecar(args.out, {
        "net": net_cfg.to_dict(),
        "spectrogram": spec.as_dict(),
        "pre_emphasis": label_header.get("pre_emphasis", DEFAULT_PRE_EMPHASIS),
        "train": {**opts, "seed": args.seed, "init_seed": args.init_seed, "steps_run": len(result.trace)},
        "calibration": cal.to_dict(),
    })
    losses = [r.loss for r in result.trace]
    if losses:
        print(f"trained {len(losses)} steps; final loss {losses[-1]:.4f}; N={cal.N:.4f}")
    else:
        print(f"no steps run; N={cal.N:.4f}")


# -- evaluation ------------------------------------------------------------------

def _embedded_selection(args):
    net, side, spec = _load_model(args.checkpoint)
    manifest = _select(load_manifest(args.manifest), args.split, args.filter)
    if not manifest.records:
        raise UsageError("selection is empty")
    recs = embed_records(
        net, manifest, manifest.records, spec, args.per_recording, args.seed, _workers(args), side.get("pre_emphasis", DEFAULT_PRE_EMPHASIS)
    )
    return net, side, spec, manifest, recs


def cmd_quality(args):
    header = _header(args)
    _log_config(header)
    _, _, _, _, recs = _embedded_selection(args)
    report = compute_quality(LabeledEmbeddingSet.from_groups(grouped(recs)))
    with open(args.out, "w") as fh:
        fh.write(report.to_json(extra={"config": header}) + "\n")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
            fh.write(report.csv_row(prefix={"label": args.label or ""}))
    print(f"IAD={report.iad:.4f} OAD={report.oad:.4f} DR={report.dr:.4f} MSC={report.msc:.4f}")


def cmd_cases(args):
    header = _header(args)
    _log_config(header)
    manifest = _select(load_manifest(args.manifest), args.split, args.filter)
    # rows are global patch indices: record k owns rows k*P .. k*P+P-1
    p = args.per_recording
    by_speaker = {}
    for k, rec in enumerate(manifest.records):
        rows = np.arange(k * p, (k + 1) * p, dtype=np.float64)[:, None]
        by_speaker.setdefault(rec.speaker_id, []).append(Recording(rec.path, rec.speaker_id, rows))
    try:
        built = build_cases(by_speaker, args.seed, args.population_size, args.cases_per_speaker)
    except TripletVoiceError as exc:
        raise UsageError(str(exc)) from exc
    cases = []
    for c in built.cases:
        row = c.roster_row()
        row["reference_rows"] = c.reference[:, 0].astype(int).tolist()
        row["questioned_rows"] = c.questioned[:, 0].astype(int).tolist()
        row["population_rows"] = [a[:, 0].astype(int).tolist() for a in c.population]
        cases.append(row)
    roster = {
        "config": header,
        "records": [r.path for r in manifest.records],
        "skipped": built.skipped,
        "cases": cases,
    }
    with open(args.out, "w") as fh:
        fh.write(json.dumps(roster, sort_keys=True) + "\n")
    n_g = sum(1 for c in cases if c["truth"] == "genuine")
    print(f"{n_g} genuine and {len(cases) - n_g} impostor cases; {len(built.skipped)} speakers skipped")


def cmd_score(args):
    header = _header(args)
    _log_config(header)
    with open(args.roster) as fh:
        roster = json.load(fh)
    net, side, spec = _load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    by_path = {r.path: r for r in manifest.records}
    missing = [p for p in roster["records"] if p not in by_path]
    if missing:
        raise UsageError(f"roster references {len(missing)} recordings absent from the manifest")
    cfg = roster["config"]
    records = [by_path[p] for p in roster["records"]]
    recs = embed_records(net, manifest, records, spec, cfg["per_recording"], cfg["seed"], _workers(args),
                         side.get("pre_emphasis", DEFAULT_PRE_EMPHASIS))
    table = np.concatenate([r.values for r in _in_order(recs, records)], axis=0)
    cal = CalibrationConstant(side["calibration"]["N"], side["calibration"]["provenance"])
    scores = []
    for c in roster["cases"]:
        case = ForensicCase(
            case_id=c["case_id"],
            truth=c["truth"],
            reference_speaker=c["reference_speaker"],
            questioned_speaker=c["questioned_speaker"],
            reference=table[c["reference_rows"]],
            questioned=table[c["questioned_rows"]],
            population=tuple(table[rows] for rows in c["population_rows"]),
            population_speakers=tuple(c["population_speakers"]),
        )
        scores.append(score_case(case, cal))
    write_scores_csv(args.out, scores, header={**header, "calibration": cal.to_dict()})
    print(f"scored {len(scores)} cases")


def _in_order(recs, records):
    lookup = {r.recording_id: r for group in recs.values() for r in group}
    return [lookup[r.path] for r in records]


def cmd_report(args):
    header = _header(args)
    _log_config(header)
    rows = read_scores_csv(args.scores)
    os.makedirs(args.out_dir, exist_ok=True)
    summary = {"config": header}
    for name, polarity in (("lr_d", LOWER), ("lr_dr", HIGHER)):
        g = [getattr(r, name) for r in rows if r.truth == "genuine"]
        i = [getattr(r, name) for r in rows if r.truth == "impostor"]
        scores = ScoreSet(g, i, polarity)
        summary[name] = summarize(scores)
        write_det_csv(os.path.join(args.out_dir, f"det_{name}.csv"), det_curve(scores), header)
        write_roc_csv(os.path.join(args.out_dir, f"roc_{name}.csv"), roc_curve(scores), header)
        edges, hg, hi = histogram(scores, args.bins)
        write_histogram_csv(os.path.join(args.out_dir, f"hist_{name}.csv"), edges, hg, hi, header)
    with open(os.path.join(args.out_dir, "summary.json"), "w") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for name in ("lr_d", "lr_dr"):
        s = summary[name]
        print(f"{name}: EER={s['eer']:.4f} AUC={s['auc']:.4f} d'={s['d_prime']:.4f}")


def cmd_project(args):
    header = _header(args)
    _log_config(header)
    _, _, _, _, recs = _embedded_selection(args)
    data = LabeledEmbeddingSet.from_groups(grouped(recs))
    points = project_2d(data)
    write_projection_csv(args.out, points, data.labels, header)
    print(f"projected {points.shape[0]} embeddings")


# -- parser ----------------------------------------------------------------------------

def _add_selection(p, per_recording):
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"))
    p.add_argument("--filter", action="append", metavar="FIELD=VALUE",
                   help="e.g. gender=F or dialect=Spain|Mexico; repeatable (conjunction)")
    p.add_argument("--per-recording", type=int, default=per_recording)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--workers", type=int)


def build_parser():
    parser = _Parser(prog="tripletvoice", description="Triplet-loss speaker embeddings for forensic comparison.")
    parser.add_argument("--log-level", default=os.environ.get("TRIPLETVOICE_LOG_LEVEL", "WARNING"))
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="synthetic corpus and splits")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True, parser_class=_Parser)
    p = ds_sub.add_parser("synth", help="write synthetic speakers as WAV + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utterances", type=int, required=True)
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_dataset_synth)

    p = ds_sub.add_parser("split", help="speaker-disjoint train/validation/test assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_dataset_split)

    p = sub.add_parser("preprocess", help="WAV to spectrogram patch tensors")
    _add_selection(p, per_recording=20)
    p.add_argument("--out", required=True)
    p.add_argument("--t-ms", type=float, default=2000)
    p.add_argument("--w-ms", type=float, default=100)
    p.add_argument("--h-ms", type=float, default=50)
    p.add_argument("--f-max-hz", type=float, default=8500.0)
    p.add_argument("--pre-emphasis", type=float, default=DEFAULT_PRE_EMPHASIS)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="triplet-loss training")
    p.add_argument("--patches", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", required=True, help="loss trace CSV")
    p.add_argument("--config", help="TOML file with training options")
    p.add_argument("--seed", type=int, required=True, help="batch sampling and mining seed")
    p.add_argument("--init-seed", type=int, required=True)
    for key, typ in TRAIN_KEYS.items():
        p.add_argument("--" + key.replace("_", "-"), type=typ, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quality", help="IAD/OAD/DR/MSC of a split or subgroup")
    p.add_argument("--checkpoint", required=True)
    _add_selection(p, per_recording=20)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--label")
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("cases", help="genuine/impostor case roster")
    _add_selection(p, per_recording=15)
    p.add_argument("--population-size", type=int, default=100)
    p.add_argument("--cases-per-speaker", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cases)

    p = sub.add_parser("score", help="LR_D and LR_DR for every case")
    p.add_argument("--roster", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="EER/AUC/d' with DET, ROC and histogram CSVs")
    p.add_argument("--scores", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("project", help="2-D principal-component projection CSV")
    p.add_argument("--checkpoint", required=True)
    _add_selection(p, per_recording=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"tripletvoice: error: {exc}", file=sys.stderr)
        return 1
    except (TripletVoiceError, OSError, ValueError, KeyError) as exc:
        print(f"tripletvoice: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
