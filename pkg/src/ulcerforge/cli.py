"""Command-line entry point wiring all modules into reproducible runs.

Subcommands: dataset validate|crop, train, sample, metrics fid|kid,
study serve|report, gradcheck, fixture paper-aggregates. Exit codes:
0 success, 2 usage errors (argparse), 1 runtime failures with a
single-line machine-parsable category on stderr:

    error:<category>: <message>     (category in config|shape|data|numeric|usage|io)
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_override, config_from_dict, load_config, resolve_seed
from .dataset import (crop_centered, from_model_array, load_manifest,
                      manifest_to_model_array, read_image, save_manifest,
                      write_image, ManifestEntry, WoundBox)
from .errors import (ConfigError, DataError, NumericError, ShapeError,
                     UlcerforgeError, UsageError)
from .gradcheck import (END_TO_END_TOLERANCE, OP_TOLERANCE, run_full_gradcheck)
from .metrics import (EmbeddingSpec, embed, fid, fit_gaussian, kid,
                      read_feature_file)
from .rng import stream
from .study import StudyConfig, VerdictStore, build_study, study_report, write_fixture
from .training import (CurationStats, curate_samples, fit, read_checkpoint,
                       sample_batch)


def _write_run_json(out_dir: Path, command: str, argv: list[str],
                    config: RunConfig, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    body = {
        "version": __version__,
        "command": command,
        "argv": argv,
        "seed": seed,
        "config": config.to_dict(),
    }
    (out_dir / "run.json").write_text(json.dumps(body, indent=2, sort_keys=True),
                                      encoding="utf-8")


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    overrides = getattr(args, "set", None) or []
    if overrides:
        data = cfg.to_dict()
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            apply_override(data, key, value)
        cfg = config_from_dict(data)
    return cfg


def _cmd_dataset_validate(args, argv) -> int:
    _, report = load_manifest(args.manifest)
    for line in report.lines():
        print(line)
    return 0


def _cmd_dataset_crop(args, argv) -> int:
    manifest, _ = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    for entry in manifest.entries:
        img = read_image(manifest.resolve(entry))
        for j, box in enumerate(entry.wounds):
            crop = crop_centered(img, int(round(box.cx)), int(round(box.cy)), args.size)
            name = f"{Path(entry.path).stem}_w{j}.png"
            write_image(out / name, crop)
            centered = WoundBox(cx=args.size / 2.0, cy=args.size / 2.0,
                                w=min(box.w, args.size), h=min(box.h, args.size))
            entries.append(ManifestEntry(path=name, width=args.size, height=args.size,
                                         label=entry.label,
                                         wounds=[centered.clamped(args.size, args.size)]))
    save_manifest(out / "manifest.jsonl", entries)
    print(f"wrote {len(entries)} crops to {out}")
    return 0


def _cmd_train(args, argv) -> int:
    cfg = _load_run_config(args)
    seed = resolve_seed(cfg, args.seed)
    cfg.seed = seed
    manifest_path = args.manifest or cfg.train.manifest
    if not manifest_path:
        raise ConfigError("train needs a manifest (--manifest or train.manifest)")
    manifest, _ = load_manifest(manifest_path)
    if not manifest.entries:
        raise ConfigError("training manifest has no entries")
    images = manifest_to_model_array(manifest, cfg.model.image_size)
    out = Path(args.out)
    _write_run_json(out, "train", argv, cfg, seed)
    result = fit(images, cfg.build_model_config(), cfg.build_train_config(),
                 cfg.build_schedule(), out_dir=out, resume=args.resume)
    if result.loss_log:
        first, last = result.loss_log[0].loss, result.loss_log[-1].loss
        print(f"trained {len(result.loss_log)} steps: loss {first:.4f} -> {last:.4f}")
    else:
        print("trained 0 steps (epochs=0)")
    return 0


def _cmd_sample(args, argv) -> int:
    cfg = _load_run_config(args)
    seed = resolve_seed(cfg, args.seed)
    cfg.seed = seed
    params, _, _, meta = read_checkpoint(args.checkpoint)
    saved = meta.get("schedule")
    if saved:  # the model was trained under this schedule; prefer it
        from .schedule import build_linear_schedule

        schedule = build_linear_schedule(saved["steps"], saved["beta_start"],
                                         saved["beta_end"])
    else:
        schedule = cfg.build_schedule()
    out = Path(args.out)
    _write_run_json(out, "sample", argv, cfg, seed)
    count = args.count if args.count is not None else cfg.sample.count
    samples = sample_batch(params, schedule, count, stream(seed, "sampler"),
                           size=cfg.model.image_size)
    kept = list(range(samples.shape[0]))
    if args.curate or cfg.sample.curate:
        manifest_path = args.manifest or cfg.train.manifest
        if not manifest_path:
            raise ConfigError("--curate needs the training manifest for channel stats")
        manifest, _ = load_manifest(manifest_path)
        train_images = manifest_to_model_array(manifest, cfg.model.image_size)
        stats = CurationStats.from_images(train_images)
        k_sigma = args.k_sigma if args.k_sigma is not None else cfg.sample.k_sigma
        result = curate_samples(samples, stats, k_sigma=k_sigma)
        kept = result.kept
        (out / "curation.json").write_text(json.dumps({
            "kept": result.kept,
            "discarded": [{"index": i, "reason": r} for i, r in result.discarded],
            "warnings": result.warnings,
        }, indent=2), encoding="utf-8")
        print(f"curation kept {len(result.kept)}/{samples.shape[0]} samples")
    entries = []
    for rank, idx in enumerate(kept):
        name = f"sample_{rank:04d}.png"
        write_image(out / name, from_model_array(samples[idx]))
        entries.append(ManifestEntry(path=name, width=cfg.model.image_size,
                                     height=cfg.model.image_size,
                                     label="synthetic", wounds=[]))
    save_manifest(out / "manifest.jsonl", entries)
    print(f"wrote {len(entries)} samples to {out}")
    return 0


def _features_from_path(path: str, cfg: RunConfig) -> np.ndarray:
    """Feature matrix from a .tsv feature file or an image manifest."""
    if path.endswith(".tsv"):
        _, rows = read_feature_file(path)
        return rows
    manifest, _ = load_manifest(path)
    images = manifest_to_model_array(manifest, cfg.model.image_size)
    m = cfg.metrics
    if m.embedding == "flatten":
        dim = m.embedding_dim or int(np.prod(images.shape[1:]))
        spec = EmbeddingSpec(kind="flatten", dim=dim)
    elif m.embedding == "random_conv":
        spec = EmbeddingSpec(kind="random_conv", dim=m.embedding_dim or 64,
                             seed=m.embedding_seed)
    elif m.embedding == "external":
        spec = EmbeddingSpec(kind="external", dim=m.embedding_dim, path=m.external_path)
        return embed(images, spec, ids=[e.path for e in manifest.entries])
    else:
        raise ConfigError(f"unknown embedding {m.embedding!r}")
    return embed(images, spec)


def _cmd_metrics(args, argv) -> int:
    cfg = _load_run_config(args)
    a = _features_from_path(args.a, cfg)
    b = _features_from_path(args.b, cfg)
    if args.metric == "fid":
        value = fid(fit_gaussian(a), fit_gaussian(b))
        print(value)
    else:
        seed = resolve_seed(cfg, args.seed)
        subset_size = args.subset_size or cfg.metrics.subset_size
        subsets = args.subsets or cfg.metrics.subsets
        limit = min(a.shape[0], b.shape[0])
        if subset_size > limit:
            subset_size = limit
        mean, std = kid(a, b, subset_size=subset_size, subsets=subsets,
                        rng=stream(seed, "kid-subsets"))
        print(mean, std)
    return 0


def _cmd_study_serve(args, argv) -> int:
    from .server import serve_study

    cfg = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study_path = out / "study.json"
    admin_token = args.admin_token or cfg.study.admin_token
    if study_path.exists():
        study = StudyConfig.from_json(study_path.read_text(encoding="utf-8"))
        if admin_token:
            study.admin_token = admin_token
    else:
        if not admin_token:
            raise ConfigError("study serve needs an admin token "
                              "(--admin-token or study.admin_token)")
        manifest_path = args.manifest or cfg.study.manifest
        if not manifest_path:
            raise ConfigError("study serve needs a manifest (--manifest or study.manifest)")
        manifest, _ = load_manifest(manifest_path)
        study = build_study(manifest, cfg.study.split_real, cfg.study.split_synthetic,
                            cfg.study.shuffle_seed, admin_token,
                            raters_expected=cfg.study.raters_expected)
        study_path.write_text(study.to_json(), encoding="utf-8")
    _write_run_json(out, "study-serve", argv, cfg, resolve_seed(cfg, None))
    store = VerdictStore(out / "verdicts.jsonl")
    host = args.host or cfg.study.host
    port = args.port if args.port is not None else cfg.study.port
    frontend = args.frontend or cfg.study.frontend_dir or None
    server = serve_study(study, store, host=host, port=port, frontend_dir=frontend)
    actual_port = server.server_address[1]
    print(f"serving study on http://{host}:{actual_port}/ "
          f"({study.images_total} images, log {out / 'verdicts.jsonl'})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        store.close()
    return 0


def _cmd_study_report(args, argv) -> int:
    study = StudyConfig.from_json(Path(args.study).read_text(encoding="utf-8"))
    store = VerdictStore(args.verdict_log)
    metric_series = None
    if args.metric_series:
        metric_series = {k: float(v) for k, v in
                         json.loads(Path(args.metric_series).read_text(encoding="utf-8")).items()}
    report = study_report(study, store.snapshot(), metric_series=metric_series,
                          allow_partial=args.allow_partial)
    store.close()
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    print(report.histogram_text(), end="")
    return 0


def _cmd_gradcheck(args, argv) -> int:
    worst_op, worst_e2e = run_full_gradcheck(
        seeds=args.seeds, report=print if args.verbose else None)
    print(f"max per-op relative error:     {worst_op:.3e} (tolerance {OP_TOLERANCE:g})")
    print(f"max end-to-end relative error: {worst_e2e:.3e} (tolerance {END_TO_END_TOLERANCE:g})")
    ok = worst_op <= OP_TOLERANCE and worst_e2e <= END_TO_END_TOLERANCE
    print("gradcheck PASS" if ok else "gradcheck FAIL")
    return 0 if ok else 1


def _cmd_fixture(args, argv) -> int:
    study_path, log_path = write_fixture(args.out)
    study = StudyConfig.from_json(study_path.read_text(encoding="utf-8"))
    store = VerdictStore(log_path)
    report = study_report(study, store.snapshot())
    store.close()
    s = report.scores
    print(f"wrote {study_path} and {log_path}")
    print(f"marked real {s.fraction_marked_real:.0%}, real accuracy {s.real_accuracy:.0%}, "
          f"synthetic accuracy {s.synthetic_accuracy:.0%}, fooling rate {s.fooling_rate:.0%}")
    print(f"class rating means: real {report.class_rating['real'].mean:.2f}, "
          f"synthetic {report.class_rating['synthetic'].mean:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ulcerforge",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True):
        p.add_argument("--config", help="run config JSON file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, e.g. --set train.batch_size=16")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="root seed override")

    ds = sub.add_parser("dataset", help="manifest validation and cropping")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    v = ds_sub.add_parser("validate", help="parse a manifest and print its report")
    v.add_argument("--manifest", required=True)
    v.set_defaults(func=_cmd_dataset_validate)
    c = ds_sub.add_parser("crop", help="crop wound-centered boxes from each entry")
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--size", type=int, default=100)
    c.set_defaults(func=_cmd_dataset_crop)

    t = sub.add_parser("train", help="train the denoiser on a manifest")
    add_common(t)
    t.add_argument("--manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true",
                   help="continue from the newest checkpoint in --out")
    t.set_defaults(func=_cmd_train)

    s = sub.add_parser("sample", help="generate samples from a checkpoint")
    add_common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--curate", action="store_true")
    s.add_argument("--k-sigma", type=float, default=None, dest="k_sigma")
    s.add_argument("--manifest", help="training manifest (for curation stats)")
    s.set_defaults(func=_cmd_sample)

    m = sub.add_parser("metrics", help="FID / KID between two sets")
    m.add_argument("metric", choices=["fid", "kid"])
    add_common(m)
    m.add_argument("--a", required=True, help="feature .tsv or image manifest")
    m.add_argument("--b", required=True, help="feature .tsv or image manifest")
    m.add_argument("--subset-size", type=int, default=None, dest="subset_size")
    m.add_argument("--subsets", type=int, default=None)
    m.set_defaults(func=_cmd_metrics)

    st = sub.add_parser("study", help="blind rating study service and reports")
    st_sub = st.add_subparsers(dest="study_command", required=True)
    sv = st_sub.add_parser("serve", help="serve the rating session protocol")
    add_common(sv, seed=False)
    sv.add_argument("--manifest")
    sv.add_argument("--out", required=True, help="study dir (study.json, verdicts.jsonl)")
    sv.add_argument("--host", default=None)
    sv.add_argument("--port", type=int, default=None)
    sv.add_argument("--admin-token", default=None, dest="admin_token")
    sv.add_argument("--frontend", default=None, help="static frontend directory")
    sv.set_defaults(func=_cmd_study_serve)
    rp = st_sub.add_parser("report", help="score a verdict log")
    rp.add_argument("--study", required=True, help="study.json path")
    rp.add_argument("--verdict-log", required=True, dest="verdict_log")
    rp.add_argument("--metric-series", default=None, dest="metric_series",
                    help="JSON object mapping image token -> metric value")
    rp.add_argument("--allow-partial", action="store_true", dest="allow_partial")
    rp.add_argument("--out", default=None)
    rp.set_defaults(func=_cmd_study_report)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=_cmd_gradcheck)

    f = sub.add_parser("fixture", help="write bundled test fixtures")
    f_sub = f.add_subparsers(dest="fixture_command", required=True)
    pa = f_sub.add_parser("paper-aggregates",
                          help="verdict fixture matching the published aggregates")
    pa.add_argument("--out", required=True)
    pa.set_defaults(func=_cmd_fixture)

    return parser


_CATEGORIES = [
    (ConfigError, "config"),
    (ShapeError, "shape"),
    (DataError, "data"),
    (NumericError, "numeric"),
    (UsageError, "usage"),
]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except UlcerforgeError as err:
        for cls, category in _CATEGORIES:
            if isinstance(err, cls):
                print(f"error:{category}: {err}", file=sys.stderr)
                return 1
        print(f"error:internal: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error:io: {err}", file=sys.stderr)
        return 1
    except IndexError as err:
        print(f"error:data: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
