"""``valence`` command line: synth, aggregate, partition-check, train, eval, report.

Exit codes: 0 success, 1 usage or config error, 2 data/schema error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import aggregation as agg
from . import modelio, pipeline, report, synth
from .autodiff import TrainingError
from .baselines import grid_search_hmm, grid_search_svr, predict_hmm, predict_svr
from .baselines.hmm import HmmModel
from .baselines.svr import SvrModel
from .config import ConfigError, RunConfig, load_config
from .data import (
    COMBINATIONS,
    PARTITIONS,
    LoadError,
    check_partitions,
    combination_name,
    fmt,
    load_corpus,
    n_windows_for,
    parse_combination,
    read_manifest,
    write_gold,
)
from .metrics import ccc
from .modelio import ModelFormatError
from .neural.common import write_training_log
from .neural.lstm import LstmModel, predict_lstm, train_lstm
from .neural.vrnn import VrnnModel, predict_vrnn, train_vrnn

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--seed", type=int, help="run seed (default 7)")
    p.add_argument("--out", metavar="DIR", help="output directory (default .)")
    p.add_argument("--modalities", choices=COMBINATIONS)
    p.add_argument("--model", choices=("svr", "hmm", "lstm", "vrnn"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = _Parser(prog="valence", description=__doc__.splitlines()[0])
    ap.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    s.add_argument("--targets", metavar="TR,VA,TE", help="targets per partition, e.g. 12,4,4")
    s.add_argument("--videos-per-target", type=int)
    s.add_argument("--windows", type=int, help="video length in 0.5 s windows")

    a = sub.add_parser("aggregate", parents=[common], help="filter observers, build gold tracks, human benchmark")
    a.add_argument("--data", metavar="DIR", help="directory with manifest.csv and ratings.csv")
    a.add_argument("--ratings", metavar="PATH")
    a.add_argument("--manifest", metavar="PATH")

    c = sub.add_parser("partition-check", parents=[common], help="partition balance and target disjointness")
    c.add_argument("--data", metavar="DIR")
    c.add_argument("--manifest", metavar="PATH")
    c.add_argument("--gold", metavar="PATH", help="gold.csv for valence-class ratios")

    t = sub.add_parser("train", parents=[common], help="train on Train, select on Validation")
    t.add_argument("--data", metavar="DIR")
    t.add_argument("--gold", metavar="PATH", help="gold.csv (default DATA/gold.csv)")

    e = sub.add_parser("eval", parents=[common], help="per-video CCC of a trained model")
    e.add_argument("model_file", metavar="MODEL")
    e.add_argument("--partition", choices=PARTITIONS, default="Test")
    e.add_argument("--data", metavar="DIR")
    e.add_argument("--gold", metavar="PATH")

    r = sub.add_parser("report", parents=[common], help="model x modality grid from evaluation reports")
    r.add_argument("reports", nargs="+", metavar="REPORT.json")
    return ap


def _config(args) -> RunConfig:
    flags = {k: getattr(args, k, None) for k in ("seed", "out", "modalities", "model", "data", "gold")}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    return load_config(args.config, flags)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    return out


def _data_path(cfg: RunConfig, explicit: str | None, name: str) -> Path:
    return Path(explicit) if explicit else Path(cfg.data) / name


def _gold_path(cfg: RunConfig) -> Path:
    return Path(cfg.gold) if cfg.gold else Path(cfg.data) / "gold.csv"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    sc_cfg = replace(cfg.synth, seed=cfg.seed)
    if args.targets:
        try:
            parts = tuple(int(x) for x in args.targets.split(","))
        except ValueError:
            raise UsageError(f"--targets expects three integers, got {args.targets!r}") from None
        if len(parts) != 3:
            raise UsageError(f"--targets expects three integers, got {args.targets!r}")
        sc_cfg = replace(sc_cfg, targets=parts)
    if args.videos_per_target is not None:
        sc_cfg = replace(sc_cfg, videos_per_target=args.videos_per_target)
    if args.windows is not None:
        sc_cfg = replace(sc_cfg, T=args.windows)
    try:
        sc = synth.generate(sc_cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out(cfg)
    paths = synth.write(sc, out)
    counts = {p: len(sc.corpus.partition(p)) for p in PARTITIONS}
    print(f"wrote {len(sc.corpus)} videos ({', '.join(f'{p} {n}' for p, n in counts.items())}) to {out}")
    for name in sorted(paths):
        print(f"  {paths[name].name}")
    return EXIT_OK


def cmd_aggregate(args, cfg: RunConfig) -> int:
    manifest = read_manifest(_data_path(cfg, args.manifest, "manifest.csv"))
    lengths = {e.video_id: n_windows_for(e.duration_s) for e in manifest}
    by_video = agg.read_ratings(_data_path(cfg, args.ratings, "ratings.csv"), lengths)
    partition_of = {e.video_id: e.partition for e in manifest}
    unknown = sorted(set(by_video) - set(partition_of))
    if unknown:
        raise DataError(f"ratings reference videos missing from the manifest: {', '.join(unknown[:5])}")
    tracks = [t for vid in sorted(by_video) for t in by_video[vid]]
    golds, excluded, kept, insufficient = pipeline.gold_from_ratings(tracks)
    unrated = sorted(set(partition_of) - set(by_video))
    out = _out(cfg)
    write_gold(out / "gold.csv", {vid: (g.ewe, g.sd) for vid, g in golds.items()})
    agg.write_exclusions(out / "exclusions.csv", excluded)
    bench = agg.leave_one_out_benchmark(kept)

    lines = [f"observers: {len(tracks)} tracks, {len(excluded)} excluded; gold tracks for {len(golds)} videos"]
    for p in PARTITIONS:
        scores = {v: s for v, s in bench.per_video.items() if partition_of.get(v) == p}
        if not scores:
            lines.append(f"{p}: no video with enough observers")
            continue
        rep = report.EvalReport("human", "ATV", p, scores, cfg.fingerprint(), cfg.seed)
        report.write_report_json(out / f"human_{p}.json", rep)
        lines.append(f"{p}: {report.human_row(rep.summary)}")
    short = sorted(set(insufficient) | set(bench.skipped) | set(unrated))
    lines.append("insufficient observers:" + ("" if short else " none"))
    for vid in short:
        n = len(kept.get(vid, []))
        lines.append(f"  {vid} ({n} usable observer{'s' if n != 1 else ''})")
    text = "\n".join(lines) + "\n"
    (out / "aggregate.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_partition_check(args, cfg: RunConfig) -> int:
    entries = read_manifest(_data_path(cfg, args.manifest, "manifest.csv"))
    classes = None
    gold = args.gold or (str(_gold_path(cfg)) if _gold_path(cfg).exists() else None)
    if gold:
        from .data import read_gold

        classes = {vid: agg.classify_video(e).value for vid, (e, _) in read_gold(gold).items()}
    rep = check_partitions(entries, classes)
    print(rep.render())
    return EXIT_OK if rep.disjoint else EXIT_DATA


def _load(cfg: RunConfig, gold_override: str | None = None):
    gold = Path(gold_override) if gold_override else _gold_path(cfg)
    return load_corpus(Path(cfg.data) / "manifest.csv", gold)


def _baseline_pairs(records, mods):
    return [(s.features, g) for s, g in pipeline.sequences(records, mods)]


def cmd_train(args, cfg: RunConfig) -> int:
    mods = parse_combination(cfg.modalities)
    splits = _load(cfg).training_view()
    if not splits.train or not splits.val:
        raise DataError("training needs non-empty Train and Validation partitions")
    out = _out(cfg)
    stem = f"{cfg.model}_{cfg.modalities}"
    dims = splits.train[0].fused(mods).dims
    run = {"fingerprint": cfg.fingerprint(), "seed": cfg.seed, "modalities": cfg.modalities, "dims": list(dims)}
    if cfg.model in ("svr", "hmm"):
        train, val = _baseline_pairs(splits.train, mods), _baseline_pairs(splits.val, mods)
        if not train or not val:
            raise DataError("no Train or Validation video has a gold track")
        if cfg.model == "svr":
            model, scores = grid_search_svr(train, val)
            header, key_names = "epsilon,C,val_ccc", ("epsilon", "C")
        else:
            model, scores = grid_search_hmm(train, val, seed=cfg.seed, equal_frequency=cfg.equal_frequency_bins)
            header, key_names = "n_bins,n_components,val_ccc", ("n_bins", "n_components")
        with (out / f"grid_{stem}.csv").open("w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for k in sorted(scores):
                fh.write(",".join(fmt(x) if isinstance(x, float) else str(x) for x in k) + f",{fmt(scores[k])}\n")
        best = max(scores, key=scores.get)
        chosen = ", ".join(f"{n}={v}" for n, v in zip(key_names, best))
        print(f"{cfg.model}: selected {chosen} (Validation CCC {scores[best]:.3f})")
    else:
        train = pipeline.sequences(splits.train, mods)
        val = pipeline.sequences(splits.val, mods)
        if not train or not val:
            raise DataError("no Train or Validation video has a gold track")
        trainer = train_lstm if cfg.model == "lstm" else train_vrnn
        model, rows = trainer(train, val, cfg.model_config())
        write_training_log(out / f"train_log_{stem}.csv", rows)
        vals = [r for r in rows if r.split == "val"]
        best = max(vals, key=lambda r: r.ccc)
        print(f"{cfg.model}: best epoch {best.epoch} of {len(vals)} (Validation CCC {best.ccc:.3f})")
    path = out / f"model_{stem}.bin"
    modelio.save_model(path, model, run)
    print(f"wrote {path}")
    return EXIT_OK


def predict(model, seqs) -> list[np.ndarray]:
    if isinstance(model, SvrModel):
        return [predict_svr(model, s) for s in seqs]
    if isinstance(model, HmmModel):
        return [predict_hmm(model, s) for s in seqs]
    if isinstance(model, LstmModel):
        return predict_lstm(model, seqs)
    if isinstance(model, VrnnModel):
        return predict_vrnn(model, seqs)
    raise TypeError(f"unsupported model {type(model).__name__}")


def cmd_eval(args, cfg: RunConfig) -> int:
    model, meta = modelio.load_model(args.model_file)
    run = meta.get("run", {})
    combo = run.get("modalities")
    if combo not in COMBINATIONS:
        raise DataError(f"{args.model_file}: model file does not record its modality combination")
    if args.modalities and args.modalities != combo:
        raise DataError(f"modality mismatch: model was trained on {combo}, --modalities asks for {args.modalities}")
    mods = parse_combination(combo)
    corpus = _load(cfg, args.gold)
    records = corpus.partition(args.partition)
    present = {m for r in corpus.records for m in r.modalities}
    missing = [m for m in mods if m not in present]
    if missing:
        raise DataError(f"modality mismatch: model uses {combo} but the corpus has no {combination_name(missing)} features")
    pairs = pipeline.sequences(records, mods)
    if not pairs:
        raise DataError(f"no {args.partition} video has a gold track")
    seqs = [s for s, _ in pairs]
    want = tuple(run.get("dims", []))
    if want and seqs[0].dims != want:
        raise DataError(f"modality mismatch: model expects block dims {want}, corpus gives {seqs[0].dims}")
    preds = predict(model, seqs)
    vids = [r.video_id for r in records if r.gold is not None]
    per_video = {v: ccc(p, g) for v, p, (_, g) in zip(vids, preds, pairs)}
    rep = report.EvalReport(
        modelio.kind_of(model), combo, args.partition, per_video, run.get("fingerprint", ""), run.get("seed"),
        {"model_file": Path(args.model_file).name},
    )
    out = _out(cfg)
    stem = f"eval_{rep.model}_{combo}_{args.partition}"
    report.write_report_json(out / f"{stem}.json", rep)
    report.write_report_csv(out / f"{stem}.csv", rep)
    print(f"{rep.model} {combo} {args.partition}: CCC {rep.summary.format()} over {len(per_video)} videos")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    reps = [report.read_report(p) for p in args.reports]
    grids = report.build_grids(reps)
    text = report.render_text(grids)
    out = _out(cfg)
    (out / "report.txt").write_text(text, encoding="utf-8")
    report.write_grid_csv(out / "report.csv", grids)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "aggregate": cmd_aggregate,
    "partition-check": cmd_partition_check,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # --help exits 0, parse errors exit 1
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"valence: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, ModelFormatError, DataError, ValueError) as exc:
        print(f"valence: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"valence: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"valence: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
