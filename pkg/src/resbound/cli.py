"""``resbound`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .degrade import DegradationRecipe, DegradeConfig, apply_recipe_with_counts, sample_recipe
from .errors import DataError, NumericError
from .phantom import PhantomSpec, generate_corpus, load_corpus, save_corpus
from .protocol import (EvalConfig, MetricRow, OverlapRow, PairedRow, RunRow, ExternalRow, default_workers,
                       external_eval, load_external_pairs, make_external_pairs, mc_stability, overlap_analysis,
                       paired_comparison, run_recovery_matrix, save_external_pairs)
from .reports import Aggregate, ReportBundle, RunManifest, Table, digest_inputs, emit_report, verify_report
from .restorer import load_checkpoint, restore_slices, save_checkpoint
from .training import LossWeights, TrainConfig, TrainingLog, train
from .volume import Volume, load_volume, save_map, save_volume

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int(s):
    return int(s, 0)


def _read_json(path, what):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
    except OSError as exc:
        raise DataError(f"cannot read {what} {path!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path!r} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise DataError(f"{what} {path!r} must hold a JSON object")
    return d


def _build(cls, d, what):
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except TypeError as exc:
        raise DataError(f"bad {what}: {exc}") from None


def _load_model(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path!r}: {exc.strerror}") from None


def _eval_config(args):
    cfg = _build(EvalConfig, _read_json(args.config, "evaluation config"), "evaluation config")
    workers = args.workers if args.workers is not None else default_workers()
    return EvalConfig(cfg.degrade, cfg.thresholds, cfg.baseline, cfg.eval_slices, cfg.n_seeds, cfg.eps_mc,
                      max(1, workers))


# -- subcommands ---------------------------------------------------------------

def cmd_phantom(args):
    spec = _build(PhantomSpec, _read_json(args.spec, "phantom spec"), "phantom spec")
    t0 = time.perf_counter()
    if args.external:
        pairs = make_external_pairs(args.count, spec.seed, spec)
        save_external_pairs(pairs, args.out, {"spec": spec.__dict__, "count": args.count})
        table = Table(("case_id",), [(p.case_id,) for p in pairs])
        listing = "pairs.json"
    else:
        cases = generate_corpus(spec, args.count, args.offset)
        save_corpus(cases, args.out, spec)
        table = Table(("case_id", "seed"), [(c.case_id, c.seed) for c in cases])
        listing = "corpus.json"
    written = sorted(k.split("/", 1)[1] for k in digest_inputs("o", args.out)
                     if not k.endswith(("manifest.json", "summary.json", "timing.json", "cases.csv")))
    manifest = RunManifest("phantom", {"spec": spec.__dict__, "count": args.count, "offset": args.offset,
                                       "external": args.external}, spec.seed)
    manifest.wall_clock_s = time.perf_counter() - t0
    emit_report(ReportBundle(manifest, {"cases": table}, {"case_count": Aggregate("cases", "case_id", "count")},
                             tuple(written)), args.out)
    print(f"wrote {len(table.rows)} cases to {args.out} ({listing})")


def cmd_degrade(args):
    if (args.recipe is None) == (args.sample_seed is None):
        raise UsageError("degrade: give exactly one of --recipe or --sample-seed")
    vol = load_volume(args.inp)
    if args.recipe is not None:
        try:
            recipe = DegradationRecipe.from_dict(_read_json(args.recipe, "recipe"))
        except (KeyError, TypeError) as exc:
            raise DataError(f"bad recipe: {exc}") from None
    else:
        recipe = sample_recipe(_build(DegradeConfig, _read_json(args.config, "degrade config"), "degrade config"),
                               args.sample_seed)
    out, counts = apply_recipe_with_counts(vol, recipe)
    save_volume(out, args.out)
    with open(args.out + ".recipe.json", "w", encoding="utf-8") as f:
        f.write(recipe.to_json() + "\n")
    print(json.dumps({"clamp_counts": counts}, sort_keys=True))


def cmd_train(args):
    d = _read_json(args.config, "training config")
    weights = _build(LossWeights, d.pop("loss_weights", {}), "loss weights")
    cfg = _build(TrainConfig, d, "training config")
    if args.corpus is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "corpus": args.corpus})
    t0 = time.perf_counter()
    params, log = train(cfg, weights, log_every=args.log_every,
                        logger=(lambda s: print(s, file=sys.stderr)) if args.log_every else None)
    save_checkpoint(params, args.out)
    cols = TrainingLog.columns
    table = Table(cols, [tuple("" if r.get(c) is None else r[c] for c in cols) for r in log.rows if "total" in r])
    val = Table(("step", "val_restore"), log.validation())
    manifest = RunManifest("train", {**cfg.to_dict(), "loss_weights": weights.__dict__}, cfg.seed,
                           digest_inputs("corpus", cfg.corpus))
    manifest.wall_clock_s = time.perf_counter() - t0
    aggs = {"steps": Aggregate("training_log", "step", "count"),
            "mean_total": Aggregate("training_log", "total", "mean"),
            "min_total": Aggregate("training_log", "total", "min"),
            "min_val_restore": Aggregate("validation", "val_restore", "min")}
    tables = {"training_log": table}
    if val.rows:
        tables["validation"] = val
    else:
        del aggs["min_val_restore"]
    emit_report(ReportBundle(manifest, tables, aggs, ("model.bin", "model.json")), args.out)
    print(f"trained {cfg.steps} steps; checkpoint in {args.out}")


def cmd_restore(args):
    model = _load_model(args.model)
    vol = load_volume(args.inp)
    out = restore_slices(vol.voxels, model, maps=True)
    save_volume(Volume(out["y"], vol.spacing), args.out)
    if args.emit_maps:
        os.makedirs(args.emit_maps, exist_ok=True)
        for key, name in (("r", "residual"), ("m", "edit_map"), ("u", "uncertainty")):
            save_map(out[key], os.path.join(args.emit_maps, name))
        save_map((out["m"] * out["r"]).astype(np.float32), os.path.join(args.emit_maps, "applied_edit"))
    print(f"restored {vol.depth} slices to {args.out}")


def _eval_manifest(name, args, cfg):
    inputs = {**digest_inputs("corpus", args.corpus), **digest_inputs("model", args.model)}
    return RunManifest(name, cfg.to_dict(), args.seed, inputs)


def cmd_eval_matrix(args):
    cfg = _eval_config(args)
    model = _load_model(args.model)
    cases = load_corpus(args.corpus)
    t0 = time.perf_counter()
    rep = run_recovery_matrix(cases, model, cfg, args.seed)
    tables = {"metrics": Table(MetricRow.COLUMNS, [r.as_tuple() for r in rep.rows])}
    aggs = {}
    for m in rep.methods:
        w = (("method", m),)
        aggs[f"{m}.mean_target_gain"] = Aggregate("metrics", "target_gain", "mean", w)
        aggs[f"{m}.std_target_gain"] = Aggregate("metrics", "target_gain", "std", w)
        aggs[f"{m}.mean_psnr_db"] = Aggregate("metrics", "psnr_db", "mean", w)
        aggs[f"{m}.std_psnr_db"] = Aggregate("metrics", "psnr_db", "std", w)
        aggs[f"{m}.iatrogenic_rate"] = Aggregate("metrics", "iatrogenic", "true_rate", w)
        aggs[f"{m}.mean_footprint_max"] = Aggregate("metrics", "footprint_max", "mean", w)
        aggs[f"{m}.max_footprint_max"] = Aggregate("metrics", "footprint_max", "max", w)
        aggs[f"{m}.mean_footprint_fraction"] = Aggregate("metrics", "footprint_fraction", "mean", w)
    paired = []
    for other in ("gaussian", "nlm"):
        pr = paired_comparison(rep.rows_for("bounded"), rep.rows_for(other))
        paired += [(other,) + r.as_tuple() + (r.outcome == "win",) for r in pr.rows]
        w = (("baseline", other),)
        aggs[f"vs_{other}.win_rate_target_gain"] = Aggregate("paired", "win", "true_rate", w)
        aggs[f"vs_{other}.mean_delta_target_gain"] = Aggregate("paired", "delta_target_gain", "mean", w)
        aggs[f"vs_{other}.mean_delta_psnr_db"] = Aggregate("paired", "delta_psnr_db", "mean", w)
    tables["paired"] = Table(("baseline",) + PairedRow.COLUMNS + ("win",), paired)
    manifest = _eval_manifest("eval-matrix", args, cfg)
    manifest.wall_clock_s = time.perf_counter() - t0
    emit_report(ReportBundle(manifest, tables, aggs), args.out)
    print(f"evaluated {rep.case_count} cases; bundle in {args.out}")


def cmd_mc_stability(args):
    cfg = _eval_config(args)
    model = _load_model(args.model)
    cases = load_corpus(args.corpus)
    t0 = time.perf_counter()
    rep = mc_stability(cases, cfg.n_seeds, model, cfg, args.seed)
    classes = [(cid, cls.value) for cid, cls in rep.classes.items()]
    tables = {"runs": Table(RunRow.COLUMNS, [r.as_tuple() for r in rep.runs]),
              "classes": Table(("case_id", "stability_class"), classes)}
    aggs = {"run_positive_rate": Aggregate("runs", "target_gain", "positive_rate"),
            "mean_target_gain": Aggregate("runs", "target_gain", "mean"),
            "case_count": Aggregate("classes", "case_id", "count")}
    for cls in rep.class_counts:
        aggs[f"count.{cls.value}"] = Aggregate("classes", "case_id", "count", (("stability_class", cls.value),))
    manifest = _eval_manifest("mc-stability", args, cfg)
    manifest.wall_clock_s = time.perf_counter() - t0
    emit_report(ReportBundle(manifest, tables, aggs), args.out)
    print(f"{len(rep.runs)} runs; positive rate {rep.run_positive_rate:.3f}; bundle in {args.out}")


def cmd_overlap(args):
    cfg = _eval_config(args)
    model = _load_model(args.model)
    cases = load_corpus(args.corpus)
    t0 = time.perf_counter()
    rep = overlap_analysis(cases, model, cfg, args.seed)
    tables = {"overlap": Table(OverlapRow.COLUMNS, [r.as_tuple() for r in rep.rows])}
    aggs = {"total_edit_count": Aggregate("overlap", "edit_count", "sum")}
    for region in rep.mean_share:
        w = (("region", region),)
        aggs[f"{region}.mean_share"] = Aggregate("overlap", "share", "mean", w)
        aggs[f"{region}.max_share"] = Aggregate("overlap", "share", "max", w)
        aggs[f"{region}.edit_count"] = Aggregate("overlap", "edit_count", "sum", w)
    manifest = _eval_manifest("overlap", args, cfg)
    manifest.wall_clock_s = time.perf_counter() - t0
    emit_report(ReportBundle(manifest, tables, aggs), args.out)
    print(f"overlap over {len(cases)} cases; bundle in {args.out}")


def cmd_external_eval(args):
    cfg = _eval_config(args)
    model = _load_model(args.model)
    pairs = load_external_pairs(args.corpus)
    t0 = time.perf_counter()
    rep = external_eval(pairs, model, None, cfg)
    tables = {"external": Table(ExternalRow.COLUMNS, [r.as_tuple() for r in rep.rows])}
    aggs = {}
    for m in rep.mean_psnr_db:
        w = (("method", m),)
        aggs[f"{m}.mean_psnr_db"] = Aggregate("external", "psnr_db", "mean", w)
        aggs[f"{m}.mean_psnr_gain_db"] = Aggregate("external", "psnr_gain_db", "mean", w)
        aggs[f"{m}.psnr_win_rate"] = Aggregate("external", "psnr_gain_db", "positive_rate", w)
        aggs[f"{m}.max_modification"] = Aggregate("external", "max_modification", "max", w)
    manifest = _eval_manifest("external-eval", args, cfg)
    manifest.wall_clock_s = time.perf_counter() - t0
    emit_report(ReportBundle(manifest, tables, aggs), args.out)
    print(f"evaluated {len(pairs)} external pairs; bundle in {args.out}")


def cmd_verify_report(args):
    verdict = verify_report(args.inp)
    for m in verdict.mismatches:
        print(m)
    if not verdict.ok:
        raise DataError(f"{len(verdict.mismatches)} mismatches in {args.inp}")
    print(f"{args.inp}: consistent")


# -- parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="resbound", description="Residual-bounded slice restoration and its evaluation harness.")
    p.add_argument("--version", action="version", version=f"resbound {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("phantom", help="generate a phantom corpus (or external-style noisy pairs)")
    s.add_argument("--spec", help="phantom spec JSON (defaults when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--offset", type=int, default=0, help="index of the first case in the seed sequence")
    s.add_argument("--external", action="store_true", help="write heavy-noise degraded/reference pairs")
    s.set_defaults(fn=cmd_phantom)

    s = sub.add_parser("degrade", help="apply a degradation recipe to a volume")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--recipe")
    s.add_argument("--sample-seed", type=_int)
    s.add_argument("--config", help="degradation config JSON for --sample-seed")
    s.set_defaults(fn=cmd_degrade)

    s = sub.add_parser("train", help="train a restorer")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--corpus", help="override the corpus path in the config")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("restore", help="restore every slice of a volume")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--emit-maps", help="directory for residual, edit, uncertainty and applied-edit maps")
    s.set_defaults(fn=cmd_restore)

    for name, fn, hlp in (("eval-matrix", cmd_eval_matrix, "recovery matrix and paired comparisons"),
                          ("mc-stability", cmd_mc_stability, "repeated-degradation stability classes"),
                          ("overlap", cmd_overlap, "meaningful edits per anatomical region"),
                          ("external-eval", cmd_external_eval, "PSNR and footprint on degraded/reference pairs")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--corpus", required=True)
        s.add_argument("--model", required=True)
        s.add_argument("--config", help="evaluation config JSON (defaults when omitted)")
        s.add_argument("--seed", type=_int, default=0)
        s.add_argument("--out", required=True)
        s.add_argument("--workers", type=int, help="worker threads (default: RESBOUND_THREADS or 1)")
        s.set_defaults(fn=fn)

    s = sub.add_parser("verify-report", help="recheck digests and summary values of a report bundle")
    s.add_argument("--in", dest="inp", required=True)
    s.set_defaults(fn=cmd_verify_report)
    return p


def run_cli(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if argv and argv[0].startswith("-") and argv[0] not in ("-h", "--help", "--version"):
            raise UsageError(f"resbound: unrecognized argument {argv[0]}")
        args = build_parser().parse_args(argv)
        args.fn(args)
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run_cli())
