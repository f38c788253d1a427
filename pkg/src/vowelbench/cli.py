"""Command-line front end.

Subcommands: ``ingest``, ``synth``, ``run``, ``ablate``, ``tgm``, ``stats``
and ``report``.  Exit codes: 0 ok, 2 configuration, 3 leakage audit, 4 I/O.
Failures print a single ``error: <category>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, analyses, harness, synth
from .classify import ClassifierSpec
from .config import ConfigError, config_hash, data_root, load_config, preprocess_params, run_seed, synth_spec
from .epochs import VOWELS
from .harness import AuditError, header_line, write_csv
from .ingest import EdfError, read_archive, read_edf, scan_bids, write_archive
from .preprocess import preprocess_recording
from .stats import apply_correction, friedman, permutation_test, wilcoxon_signed_rank, write_stats_csv

logger = logging.getLogger("vowelbench")

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT, EXIT_IO = 0, 2, 3, 4


class _Context:
    def __init__(self, cfg, n_jobs=None):
        self.cfg = cfg
        self.seed = run_seed(cfg)
        self.hash = config_hash(cfg)
        self.header = header_line(self.hash, self.seed)
        self.n_jobs = n_jobs if n_jobs is not None else cfg["eval"]["n_jobs"]


# ---------------------------------------------------------------- data and models

def load_epochs(cfg):
    if cfg["data"]["source"] == "archive":
        if not cfg["data"]["archive"]:
            raise ConfigError("data.archive is required when data.source is 'archive'")
        return read_archive(cfg["data"]["archive"])
    return synth.generate(synth_spec(cfg))


def classifier_specs(cfg, seed) -> dict:
    params = cfg["model"]["params"]
    return {k: ClassifierSpec(k, dict(params.get(k) or {}), seed)
            for k in ("gbdt", "random_forest", "lda_shrinkage", "linear_svm", "logistic")}


def build_pipelines(cfg, seed) -> dict:
    specs = classifier_specs(cfg, seed)
    fams = tuple(cfg["features"]["families"])
    k = cfg["features"]["pca_k"]
    out = {}
    for name in cfg["model"]["models"]:
        if name in specs:
            out[name] = harness.FeaturePipeline(specs[name], fams, pca_k=k, name=name)
        elif name == "soft_vote":
            members = [harness.FeaturePipeline(specs[m], fams, pca_k=k, name=m)
                       for m in ("gbdt", "random_forest", "lda_shrinkage")]
            out[name] = harness.SoftVotePipeline(members, name)
        elif name == "stacking":
            bases = [specs[m] for m in ("gbdt", "random_forest", "lda_shrinkage")]
            out[name] = harness.StackingPipeline(bases, specs["logistic"], 3, name, families=fams, pca_k=k)
        else:
            kind = {"MDM": "mdm", "TS-LDA": "ts_lda", "TS-SVM": "ts_svm"}[name.replace("+EA", "")]
            out[name] = harness.RiemannPipeline(kind, ea=name.endswith("+EA"), name=name)
    return out


def _out_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- commands

def cmd_ingest(args):
    cfg = load_config(args.config)
    root = args.root or data_root(cfg)
    if not root:
        raise ConfigError("no data root: pass --root, set data.root or the environment variable")
    event_map = cfg["data"]["event_map"] or {}
    if not event_map:
        raise ConfigError("data.event_map must map event labels to vowels")
    bad = {k: v for k, v in event_map.items() if v not in VOWELS}
    if bad:
        raise ConfigError(f"data.event_map targets must be vowels, got {bad}")
    label_map = {str(k): VOWELS.index(v) for k, v in event_map.items()}
    params = preprocess_params(cfg)
    subjects = scan_bids(root, cfg["data"]["pattern"])
    if not subjects:
        raise FileNotFoundError(f"no subject folders with EDF files under {root}")
    parts = []
    for sid, paths in subjects:
        for i, path in enumerate(paths):
            rec = read_edf(path)
            parts.append(preprocess_recording(rec, label_map, params, subject=sid, recording_id=f"run-{i + 1}"))
    from .epochs import EpochSet
    epochs = EpochSet.concatenate(parts)
    write_archive(epochs, args.out, {**params, "event_map": label_map})
    counts = {sid: int((epochs.subjects == sid).sum()) for sid in epochs.subject_ids()}
    for sid, n in counts.items():
        print(f"{sid}\t{n}")
    print(f"total\t{epochs.n_trials}")
    return EXIT_OK


def cmd_synth(args):
    cfg = load_config(args.config)
    spec = synth_spec(cfg)
    out = _out_dir(args.out)
    if args.edf:
        paths = synth.make_edf_fixture(spec, out)
        print(f"wrote {len(paths)} EDF files under {out}")
    else:
        write_archive(synth.generate(spec), out, {"synth": spec.to_dict()})
        print(f"wrote archive {out}")
    return EXIT_OK


def _write_predictions(result, path, header):
    rows = []
    for m in result.models:
        for f in result.folds[m]:
            for i, t, p in zip(f.index, f.y_true, f.y_pred):
                rows.append((m, f.fold, int(i), int(t), int(p)))
    write_csv(path, ("model", "fold_subject", "trial", "y_true", "y_pred"), rows, header)


def cmd_run(args):
    cfg = load_config(args.config)
    ctx = _Context(cfg, args.n_jobs)
    epochs = load_epochs(cfg)
    pipes = build_pipelines(cfg, ctx.seed)
    strict = cfg["eval"]["strict_audit"]
    if cfg["eval"]["protocol"] == "loso":
        result = harness.loso(epochs, pipes, seed=ctx.seed, n_jobs=ctx.n_jobs, strict=strict)
    else:
        result = harness.within_subject_cv(epochs, pipes, k=cfg["eval"]["k"], seed=ctx.seed,
                                           n_jobs=ctx.n_jobs, strict=strict)
    out = _out_dir(args.out)
    harness.write_results(result, out, ctx.header)
    _write_predictions(result, out / "predictions.csv", ctx.header)
    run_analyses(epochs, cfg, ctx, out)
    print(f"wrote {out / 'results.csv'} ({len(result.models)} models, "
          f"{len(next(iter(result.folds.values())))} folds)")
    return EXIT_OK


def run_analyses(epochs, cfg, ctx, out):
    todo = cfg["analyses"]["run"]
    if not todo:
        return
    a = cfg["analyses"]
    spec = classifier_specs(cfg, ctx.seed)[a["model"]]
    fams = tuple(a["families"])
    rows = None
    if "pairwise" in todo or "rsa" in todo:
        rows = analyses.pairwise_tasks(epochs, spec, fams, seed=ctx.seed, n_jobs=ctx.n_jobs)
        analyses.write_pairwise(rows, out / "pairwise.csv", ctx.header)
    if "rsa" in todo:
        table = analyses.FormantTable.from_mapping(a["formants"])
        D = analyses.acoustic_distances(table)
        acc = {r["pair"]: r["acc_mean"] for r in rows if len(r["pair"]) == 2}
        rep = analyses.rsa(D, acc, n_perm=cfg["stats"]["n_perm"], seed=harness.derive_seed(ctx.seed, "rsa"))
        analyses.write_rsa(rep, D, acc, out / "rsa.csv", ctx.header)
    if "importance" in todo or "dropout" in todo:
        shares, _ = analyses.loso_importance(epochs, spec, fams, seed=ctx.seed, n_jobs=ctx.n_jobs)
        analyses.write_importance(shares, out / "importance.csv", ctx.header)
        if "dropout" in todo:
            ks = [k for k in a["dropout_ks"] if k < epochs.n_channels]
            drows = analyses.channel_dropout(epochs, analyses.ranking(shares), ks, spec, fams,
                                             seed=ctx.seed, n_jobs=ctx.n_jobs)
            write_csv(out / "dropout.csv", ("direction", "k", "mean", "sd"),
                      [[r["direction"], r["k"], r["mean"], r["sd"]] for r in drows], ctx.header)
    if "erp" in todo:
        res = analyses.erp(epochs, tuple(a["erp_channels"]))
        analyses.write_erp(res, out / "erp.csv", ctx.header)
        write_stats_csv(list(res["anova"].values()), out / "erp_anova.csv", ctx.header, list(res["anova"]))
    if "learning_curve" in todo:
        pipe = harness.FeaturePipeline(spec, fams, name=spec.kind)
        ns = [n for n in cfg["eval"]["learning_curve_ns"] if n < len(epochs.subject_ids())]
        lrows = harness.learning_curve(epochs, pipe, ns, cfg["eval"]["learning_curve_reps"],
                                       seed=ctx.seed, n_jobs=ctx.n_jobs)
        write_csv(out / "learning_curve.csv", ("n_train_subjects", "mean", "sd"),
                  [[r["n"], r["mean"], r["sd"]] for r in lrows], ctx.header)
    if "within_subject" in todo:
        pipe = harness.FeaturePipeline(spec, fams, name=spec.kind)
        res = harness.within_subject_cv(epochs, pipe, k=cfg["eval"]["k"], seed=ctx.seed, n_jobs=ctx.n_jobs)
        means = harness.per_subject_means(res, spec.kind)
        write_csv(out / "within_subject.csv", ("subject", "balanced_acc"), list(means.items()), ctx.header)


def ablation_grid(cfg, axis, epochs):
    a = cfg["analyses"]
    if axis == "feature_family":
        return list(cfg["features"]["families"]) + ["all"]
    if axis == "time_window":
        return [tuple(w) for w in a["time_windows"]]
    if axis == "channel_region":
        regions = dict(a["regions"] or {})
        missing = {r: [c for c in chans if c not in epochs.channel_names] for r, chans in regions.items()}
        missing = {r: m for r, m in missing.items() if m}
        if missing:
            raise ConfigError(f"analyses.regions: unknown channels {missing}")
        regions["full"] = None
        return regions
    return list(a["pca_grid"])


def cmd_ablate(args):
    cfg = load_config(args.config)
    ctx = _Context(cfg, args.n_jobs)
    epochs = load_epochs(cfg)
    spec = classifier_specs(cfg, ctx.seed)[cfg["analyses"]["model"]]
    grid = ablation_grid(cfg, args.axis, epochs)
    rows = harness.ablation_run(epochs, args.axis, grid, spec, tuple(cfg["features"]["families"]),
                                seed=ctx.seed, n_jobs=ctx.n_jobs)
    out = _out_dir(args.out)
    cols = ("axis", "level", "model", "mean", "sd", "delta_vs_chance", "n_channels")
    write_csv(out / f"ablation_{args.axis}.csv", cols, [[r[c] for c in cols] for r in rows], ctx.header)
    for r in rows:
        print(f"{r['level']}\t{100 * r['mean']:.1f}%\t{100 * r['delta_vs_chance']:+.1f}")
    return EXIT_OK


def cmd_tgm(args):
    cfg = load_config(args.config)
    ctx = _Context(cfg, args.n_jobs)
    epochs = load_epochs(cfg)
    M, times, verdicts = harness.tgm(epochs, step=cfg["eval"]["tgm_step"], seed=ctx.seed, n_jobs=ctx.n_jobs,
                                     strict=cfg["eval"]["strict_audit"])
    out = _out_dir(args.out)
    write_csv(out / "tgm.csv", ["train_time"] + [f"{t:.6g}" for t in times],
              [[t] + list(row) for t, row in zip(times, M)], ctx.header)
    i = int(np.argmax(np.diag(M)))
    print(f"TGM {M.shape[0]}x{M.shape[1]}; diagonal peak {100 * M[i, i]:.1f}% at {1000 * times[i]:.0f} ms")
    return EXIT_OK


def _read_table(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    lines = path.read_text().splitlines()
    header = lines[0] if lines and lines[0].startswith("#") else None
    body = lines[1:] if header else lines
    return header, list(csv.DictReader(body))


def cmd_stats(args):
    d = Path(args.results_dir)
    header, rows = _read_table(d / "results.csv")
    _, preds = _read_table(d / "predictions.csv") if (d / "predictions.csv").exists() else (None, [])
    cfg = load_config(args.config) if args.config else None
    n_perm = args.n_perm if args.n_perm is not None else (cfg["stats"]["n_perm"] if cfg else 10000)
    seed = run_seed(cfg) if cfg else 42
    models = list(dict.fromkeys(r["model"] for r in rows))
    acc = {m: {r["fold_subject"]: float(r["balanced_acc"]) for r in rows if r["model"] == m} for m in models}
    n_classes = 1 + max((int(p["y_true"]) for p in preds), default=4)
    chance = (cfg["stats"]["chance"] if cfg and cfg["stats"]["chance"] else None) or 1.0 / n_classes
    correction = cfg["stats"]["correction"] if cfg else "bonferroni"
    wil = [wilcoxon_signed_rank(list(acc[m].values()), mu0=chance) for m in models]
    reports, labels = apply_correction(wil, correction), list(models)
    for m in models:
        folds = {}
        for p in preds:
            if p["model"] == m:
                folds.setdefault(p["fold_subject"], ([], []))
                folds[p["fold_subject"]][0].append(int(p["y_true"]))
                folds[p["fold_subject"]][1].append(int(p["y_pred"]))
        if folds:
            pairs = [(np.array(t), np.array(q)) for _, (t, q) in sorted(folds.items())]
            reports.append(permutation_test(pairs, n_perm=n_perm, seed=harness.derive_seed(seed, "permutation", m),
                                            n_classes=n_classes))
            labels.append(m)
    subjects = sorted(set.intersection(*[set(v) for v in acc.values()]))
    if len(models) >= 2 and len(subjects) >= 2:
        reports.append(friedman(np.array([[acc[m][s] for m in models] for s in subjects])))
        labels.append("models")
    write_stats_csv(reports, d / "stats.csv", header, labels)
    print(f"wrote {d / 'stats.csv'} ({len(reports)} tests)")
    return EXIT_OK


SUMMARY_COLUMNS = ("model", "bal_acc_mean", "bal_acc_sd", "macro_f1", "cohens_d", "p_raw", "p_bonf", "p_perm")


def cmd_report(args):
    d = Path(args.results_dir)
    header, rows = _read_table(d / "results.csv")
    stats = {}
    if (d / "stats.csv").exists():
        for r in _read_table(d / "stats.csv")[1]:
            stats[r["test"]] = r
    chance = args.chance
    models = list(dict.fromkeys(r["model"] for r in rows))
    table = []
    for m in models:
        acc = np.array([float(r["balanced_acc"]) for r in rows if r["model"] == m])
        f1 = np.array([float(r["macro_f1"]) for r in rows if r["model"] == m])
        w = stats.get(f"wilcoxon:{m}", {})
        perm = stats.get(f"permutation:{m}", {})
        table.append([m, acc.mean(), acc.std(ddof=1) if acc.size > 1 else 0.0, f1.mean(),
                      harness.cohens_d(acc, chance) if acc.size > 1 else float("nan"),
                      w.get("p_raw", ""), w.get("p_corrected", ""), perm.get("p_raw", "")])
    table.sort(key=lambda r: -r[1])
    write_csv(d / "summary.csv", SUMMARY_COLUMNS, table, header)
    print(f"{'model':<16}{'bal. acc (%)':>16}{'d':>8}{'p_bonf':>12}")
    for r in table:
        p = f"{float(r[6]):.3g}" if r[6] != "" else "-"
        print(f"{r[0]:<16}{100 * r[1]:>9.1f} ± {100 * r[2]:<4.1f}{r[4]:>8.2f}{p:>12}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vowelbench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="EDF directory -> preprocessed epoch archive")
    p.add_argument("--root", help="dataset root (default: data.root or $VOWELBENCH_DATA_ROOT)")
    p.add_argument("--out", required=True, help="archive directory")
    p.add_argument("--config")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic archive or EDF fixture")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--edf", action="store_true", help="write per-subject EDF+ files instead of an archive")
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("run", cmd_run, "evaluate the configured models"),
                                 ("tgm", cmd_tgm, "temporal generalization matrix"),
                                 ("ablate", cmd_ablate, "one-axis ablation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--n-jobs", type=int, default=None)
        if name == "ablate":
            p.add_argument("--axis", required=True, choices=harness.ABLATION_AXES)
        p.set_defaults(func=func)

    p = sub.add_parser("stats", help="significance tests over a results directory")
    p.add_argument("results_dir")
    p.add_argument("--config")
    p.add_argument("--n-perm", type=int, default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="summary table from results.csv and stats.csv")
    p.add_argument("results_dir")
    p.add_argument("--chance", type=float, default=0.2)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(category: str, code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {category}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except AuditError as exc:
        return _fail("audit", EXIT_AUDIT, exc)
    except (OSError, EdfError) as exc:
        return _fail("io", EXIT_IO, exc)


if __name__ == "__main__":
    sys.exit(main())
