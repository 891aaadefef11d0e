"""Command-line entry point for reproducible experiments.

Four subcommands: ``synth`` writes a planted corpus to disk, ``train`` fits
one model, ``eval`` scores a model or baseline on the test cases, and
``benchmark`` trains a model set under one seed and emits a comparison
table plus per-epoch AUC-versus-time traces.  Every command writes a
manifest with the fully resolved configuration; rerunning the same flags
reproduces all outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, evaluation, models, training
from .corpus import (
    Corpus,
    CorpusError,
    SplitAssignment,
    SyntheticSpec,
    generate_synthetic,
    ingest_features,
    ingest_interactions,
    partition,
    read_split,
    write_features,
    write_split,
    write_triads,
)
from .evaluation import EvaluationError
from .models import ModelConfig, ModelError
from .sampling import SamplingError
from .seeds import derive_seed
from .training import EarlyStopConfig, TrainConfig, TrainingError


class CliError(ValueError):
    """Bad flag combination that argparse alone cannot catch."""


_CLI_KINDS = {"brie": "brie", "mf-elvis": "mf_elvis", "elvis": "elvis", "cnt": "cnt", "rnd": "rnd"}
_KIND_DEFAULTS = {
    # (d, dropout, loss); brie's row is its final training protocol.
    "brie": (64, 0.75, "bpr"),
    "mf_elvis": (64, 0.0, "bce"),
    "elvis": (64, 0.2, "bce"),
}


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("data source (files XOR synthetic)")
    group.add_argument("--triads", type=Path, help="triad TSV file")
    group.add_argument("--features", type=Path, help="feature file (PFV1 binary or TSV)")
    group.add_argument("--split", type=Path, help="split TSV; omitted -> seeded partition")
    group.add_argument("--synth", action="store_true", help="generate the corpus in memory")
    group.add_argument("--synth-users", type=int, default=400)
    group.add_argument("--synth-items", type=int, default=80)
    group.add_argument("--synth-photos", type=int, default=8000)
    group.add_argument("--synth-true-dim", type=int, default=8)
    group.add_argument("--synth-feature-dim", type=int, default=32)
    group.add_argument("--synth-style-noise", type=float, default=0.3)
    group.add_argument("--synth-feature-noise", type=float, default=0.1)
    group.add_argument("--synth-seed", type=int, default=None, help="default: derived from --seed")
    group.add_argument("--val-frac", type=float, default=0.1)
    group.add_argument("--test-frac", type=float, default=0.2)


def _add_power_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--power-watts", type=float, default=65.0, help="modeled draw during training")
    parser.add_argument("--carbon-intensity", type=float, default=1.32e-4, help="g CO2 per joule")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="photorank", description=__doc__)
    parser.add_argument("--version", action="version", version=f"photorank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="write a planted corpus to disk")
    p_synth.add_argument("--users", type=int, default=400)
    p_synth.add_argument("--items", type=int, default=80)
    p_synth.add_argument("--photos", type=int, default=8000)
    p_synth.add_argument("--true-dim", type=int, default=8)
    p_synth.add_argument("--feature-dim", type=int, default=32)
    p_synth.add_argument("--style-noise", type=float, default=0.3)
    p_synth.add_argument("--feature-noise", type=float, default=0.1)
    p_synth.add_argument("--val-frac", type=float, default=0.1)
    p_synth.add_argument("--test-frac", type=float, default=0.2)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train one model and save its artifact")
    p_train.add_argument("--model", choices=("brie", "mf-elvis", "elvis"), required=True)
    p_train.add_argument("--d", type=int, default=None, help="latent factors (default per model)")
    p_train.add_argument("--dropout", type=float, default=None)
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument("--loss", choices=("bpr", "bce"), default=None)
    p_train.add_argument("--epochs", type=int, default=15)
    p_train.add_argument("--batch-size", type=int, default=2**14)
    p_train.add_argument("--hidden", type=str, default=None, help="elvis widths, e.g. 64,32")
    p_train.add_argument("--early-stop", action="store_true")
    p_train.add_argument("--patience", type=int, default=5)
    p_train.add_argument("--min-delta", type=float, default=1e-3)
    p_train.add_argument("--cap", type=int, default=100, help="epoch cap under early stopping")
    p_train.add_argument("--xavier-normal", action="store_true")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--workers", type=int, default=1, help="1 guarantees bitwise determinism")
    p_train.add_argument("--out", type=Path, required=True)
    _add_data_args(p_train)
    _add_power_args(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate an artifact or a baseline")
    p_eval.add_argument("--artifact", type=Path, help="trained model file")
    p_eval.add_argument("--model", choices=("rnd", "cnt"), help="baseline without an artifact")
    p_eval.add_argument("--k", type=int, default=10)
    p_eval.add_argument("--min-activity", type=int, default=10)
    p_eval.add_argument("--min-candidates", type=int, default=10)
    p_eval.add_argument("--sweep", type=str, default=None, help="activity thresholds, e.g. 0,10,20")
    p_eval.add_argument("--dump-cases", action="store_true")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--workers", type=int, default=1)
    p_eval.add_argument("--out", type=Path, required=True)
    _add_data_args(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("benchmark", help="train and compare a model set under one seed")
    p_bench.add_argument("--models", type=str, default="brie,mf-elvis,elvis,cnt,rnd")
    p_bench.add_argument("--d", type=int, default=None)
    p_bench.add_argument("--dropout", type=float, default=None, help="override for brie/elvis")
    p_bench.add_argument("--lr", type=float, default=1e-3)
    p_bench.add_argument("--epochs", type=int, default=15)
    p_bench.add_argument("--batch-size", type=int, default=2**14)
    p_bench.add_argument("--k", type=int, default=10)
    p_bench.add_argument("--min-activity", type=int, default=10)
    p_bench.add_argument("--min-candidates", type=int, default=10)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--workers", type=int, default=1)
    p_bench.add_argument("--out", type=Path, required=True)
    _add_data_args(p_bench)
    _add_power_args(p_bench)
    p_bench.set_defaults(func=cmd_benchmark)
    return parser


def _resolve_data(args) -> tuple[Corpus, SplitAssignment]:
    file_source = args.triads is not None or args.features is not None
    if args.synth and file_source:
        raise CliError("choose one data source: --synth or --triads/--features")
    if args.synth:
        seed = args.synth_seed if args.synth_seed is not None else derive_seed(args.seed, "corpus")
        spec = SyntheticSpec(
            n_users=args.synth_users,
            n_items=args.synth_items,
            n_photos=args.synth_photos,
            true_dim=args.synth_true_dim,
            feature_dim=args.synth_feature_dim,
            style_noise=args.synth_style_noise,
            feature_noise=args.synth_feature_noise,
            seed=seed,
        )
        return generate_synthetic(spec, args.val_frac, args.test_frac)
    if args.triads is None or args.features is None:
        raise CliError("need both --triads and --features (or --synth)")
    ingest = ingest_interactions(args.triads)
    features = ingest_features(args.features, photo_ids=ingest.photo_ids)
    corpus = Corpus(ingest.interactions, features, ids=ingest)
    if args.split is not None:
        split = read_split(args.split, len(corpus))
    else:
        split = partition(corpus, args.val_frac, args.test_frac, derive_seed(args.seed, "corpus"))
    return corpus, split


def _data_manifest(args) -> dict:
    keys = (
        "triads",
        "features",
        "split",
        "synth",
        "synth_users",
        "synth_items",
        "synth_photos",
        "synth_true_dim",
        "synth_feature_dim",
        "synth_style_noise",
        "synth_feature_noise",
        "synth_seed",
        "val_frac",
        "test_frac",
    )
    out = {}
    for key in keys:
        value = getattr(args, key, None)
        out[key] = str(value) if isinstance(value, Path) else value
    return out


def _write_manifest(out_dir: Path, command: str, resolved: dict) -> None:
    payload = {"command": command, "config": resolved, "version": __version__}
    (out_dir / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def cmd_synth(args) -> None:
    spec = SyntheticSpec(
        n_users=args.users,
        n_items=args.items,
        n_photos=args.photos,
        true_dim=args.true_dim,
        feature_dim=args.feature_dim,
        style_noise=args.style_noise,
        feature_noise=args.feature_noise,
        seed=args.seed,
    )
    corpus, split = generate_synthetic(spec, args.val_frac, args.test_frac)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_triads(out / "triads.tsv", corpus.interactions)
    write_features(out / "features.bin", corpus.features)
    write_split(out / "split.tsv", split)
    _write_manifest(
        out,
        "synth",
        {
            "spec": spec.__dict__,
            "val_frac": args.val_frac,
            "test_frac": args.test_frac,
            "files": ["triads.tsv", "features.bin", "split.tsv"],
        },
    )
    train_n, val_n, test_n = split.counts()
    print(f"synth: wrote {len(corpus)} triads to {out} (train/val/test = {train_n}/{val_n}/{test_n})")


def _parse_hidden(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    try:
        return tuple(int(w) for w in text.split(","))
    except ValueError:
        raise CliError(f"cannot parse --hidden {text!r}; expected comma-separated integers") from None


def _model_train_configs(args, kind: str, corpus: Corpus, dropout=None, hidden=None) -> tuple[ModelConfig, TrainConfig]:
    default_d, default_dropout, default_loss = _KIND_DEFAULTS[kind]
    loss = getattr(args, "loss", None) or default_loss
    if loss != _KIND_DEFAULTS[kind][2]:
        raise CliError(f"loss {loss!r} is incompatible with model {kind!r}")
    if dropout is None:
        dropout = default_dropout
    model_config = ModelConfig(
        kind=kind,
        d=args.d if args.d is not None else default_d,
        feature_dim=corpus.features.dim,
        dropout_p=dropout,
        mlp_hidden=hidden if kind == "elvis" else None,
        seed=derive_seed(args.seed, "init", kind),
        xavier_normal=getattr(args, "xavier_normal", False),
    )
    early = None
    if getattr(args, "early_stop", False):
        early = EarlyStopConfig(patience=args.patience, min_delta=args.min_delta, cap=args.cap)
    train_config = TrainConfig(
        loss=loss,
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        early_stop=early,
        seed=derive_seed(args.seed, "sampler", kind),
        power_watts=getattr(args, "power_watts", 65.0),
        carbon_intensity=getattr(args, "carbon_intensity", 1.32e-4),
    )
    return model_config, train_config


def _config_manifest(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    early = train_config.early_stop
    return {
        "model": {
            "kind": model_config.kind,
            "d": model_config.d,
            "feature_dim": model_config.feature_dim,
            "dropout_p": model_config.dropout_p,
            "mlp_hidden": list(model_config.mlp_hidden) if model_config.mlp_hidden else None,
            "seed": model_config.seed,
            "xavier_normal": model_config.xavier_normal,
        },
        "train": {
            "loss": train_config.loss,
            "lr": train_config.lr,
            "batch_size": train_config.batch_size,
            "max_epochs": train_config.max_epochs,
            "early_stop": None
            if early is None
            else {"patience": early.patience, "min_delta": early.min_delta, "cap": early.cap},
            "seed": train_config.seed,
            "power_watts": train_config.power_watts,
            "carbon_intensity": train_config.carbon_intensity,
        },
    }


def cmd_train(args) -> None:
    kind = _CLI_KINDS[args.model]
    corpus, split = _resolve_data(args)
    dropout = args.dropout
    hidden = _parse_hidden(args.hidden)
    model_config, train_config = _model_train_configs(args, kind, corpus, dropout, hidden)
    params, stats = training.train(corpus, split, model_config, train_config)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    models.save_params(params, out / "model.bin")
    with open(out / "epochs.jsonl", "w", encoding="utf-8") as fh:
        for entry in stats:
            fh.write(entry.to_json() + "\n")
    manifest = _config_manifest(model_config, train_config)
    manifest["data"] = _data_manifest(args)
    manifest["seed"] = args.seed
    manifest["workers"] = args.workers
    _write_manifest(out, "train", manifest)
    final = stats[-1]
    print(
        f"train: {kind} ran {len(stats)} epochs, final mean loss {final.mean_loss:.6f}, "
        f"artifact {out / 'model.bin'}"
    )


def _parse_sweep(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise CliError(f"cannot parse --sweep {text!r}; expected comma-separated integers") from None


def cmd_eval(args) -> None:
    if (args.artifact is None) == (args.model is None):
        raise CliError("need exactly one of --artifact or --model rnd|cnt")
    corpus, split = _resolve_data(args)
    if args.artifact is not None:
        params = models.load_params(args.artifact)
        if params.n_users != corpus.n_users:
            raise CliError(
                f"artifact was built for {params.n_users} users, corpus has {corpus.n_users}"
            )
        if params.config.feature_dim != corpus.features.dim:
            raise CliError(
                f"artifact expects feature_dim {params.config.feature_dim}, "
                f"corpus has {corpus.features.dim}"
            )
        kind = params.config.kind
        scorer = models.make_scorer(kind, params=params, corpus=corpus)
    else:
        kind = args.model
        scorer = models.make_scorer(kind, corpus=corpus, split=split, seed=derive_seed(args.seed, "eval"))

    cases = evaluation.build_test_cases(corpus, split)
    # The rnd scorer draws from one stream, so it must stay single-threaded.
    workers = 1 if kind == "rnd" else args.workers
    ranked = evaluation.rank_all(cases, scorer, workers=workers)
    report = evaluation.aggregate_ranked(cases, ranked, args.k, args.min_activity, args.min_candidates)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.tsv").write_text(evaluation.report_tsv(report, kind), encoding="utf-8")
    thresholds = _parse_sweep(args.sweep)
    if thresholds is not None:
        points = evaluation.activity_sweep_ranked(cases, ranked, thresholds)
        (out / "sweep.tsv").write_text(evaluation.sweep_tsv(points), encoding="utf-8")
    if args.dump_cases:
        evaluation.write_case_dump(out / "cases.tsv", ranked)
    manifest = {
        "model": kind,
        "artifact": str(args.artifact) if args.artifact else None,
        "k": args.k,
        "min_activity": args.min_activity,
        "min_candidates": args.min_candidates,
        "sweep": thresholds,
        "data": _data_manifest(args),
        "seed": args.seed,
        "workers": args.workers,
    }
    _write_manifest(out, "eval", manifest)
    mauc = "n/a" if report.mauc is None else f"{report.mauc:.4f}"
    print(f"eval: {kind} on {report.n_cases} cases, MAUC {mauc}, report in {out}")


def cmd_benchmark(args) -> None:
    requested = [m.strip() for m in args.models.split(",") if m.strip()]
    unknown = [m for m in requested if m not in _CLI_KINDS]
    if unknown:
        raise CliError(f"unknown model {unknown[0]!r}; choose from {sorted(_CLI_KINDS)}")
    corpus, split = _resolve_data(args)
    cases = evaluation.build_test_cases(corpus, split)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for cli_name in requested:
        kind = _CLI_KINDS[cli_name]
        if kind in _KIND_DEFAULTS:
            dropout = args.dropout if kind != "mf_elvis" else None
            model_config, train_config = _model_train_configs(args, kind, corpus, dropout, None)
            trace: list[tuple[int, float, float]] = []

            def _trace_hook(epoch, params, entry, _kind=kind):
                scorer = models.make_scorer(_kind, params=params, corpus=corpus)
                mauc = evaluation.aggregate(cases, scorer, args.k, args.min_activity, args.min_candidates).mauc
                trace.append((epoch, entry.cumulative_seconds, mauc))

            params, stats = training.train(corpus, split, model_config, train_config, epoch_hook=_trace_hook)
            models.save_params(params, out / f"model_{kind}.bin")
            with open(out / f"trace_{kind}.tsv", "w", encoding="utf-8") as fh:
                fh.write("epoch\tcumulative_seconds\tmauc\n")
                for epoch, seconds, mauc in trace:
                    value = "" if mauc is None else f"{mauc:.6f}"
                    fh.write(f"{epoch}\t{seconds:.6f}\t{value}\n")
            scorer = models.make_scorer(kind, params=params, corpus=corpus)
            n_epochs = len(stats)
            seconds = stats[-1].cumulative_seconds
            energy = stats[-1].cumulative_energy_j
            co2 = stats[-1].cumulative_co2_g
            n_params = models.count_params(model_config, corpus.n_users)
        else:
            scorer = models.make_scorer(kind, corpus=corpus, split=split, seed=derive_seed(args.seed, "eval", kind))
            n_epochs = 0
            seconds = energy = co2 = 0.0
            n_params = 0
        report = evaluation.aggregate(cases, scorer, args.k, args.min_activity, args.min_candidates)
        rows.append((kind, report, n_epochs, seconds, n_params, energy, co2))

    def fmt(value) -> str:
        return "" if value is None else f"{value:.6f}"

    with open(out / "benchmark.tsv", "w", encoding="utf-8") as fh:
        fh.write(
            f"model\tMRecall@{args.k}\tMNDCG@{args.k}\tMAUC\tMedPerc\t"
            "epochs\ttrain_seconds\tparam_count\tenergy_j\tco2_g\n"
        )
        for kind, report, n_epochs, seconds, n_params, energy, co2 in rows:
            fh.write(
                f"{kind}\t{fmt(report.mrecall)}\t{fmt(report.mndcg)}\t{fmt(report.mauc)}\t"
                f"{fmt(report.medperc)}\t{n_epochs}\t{seconds:.6f}\t{n_params}\t"
                f"{energy:.6f}\t{co2:.6f}\n"
            )
    manifest = {
        "models": requested,
        "d": args.d,
        "dropout": args.dropout,
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "k": args.k,
        "data": _data_manifest(args),
        "seed": args.seed,
        "workers": args.workers,
        "power_watts": args.power_watts,
        "carbon_intensity": args.carbon_intensity,
    }
    _write_manifest(out, "benchmark", manifest)
    print(f"benchmark: {len(rows)} models compared, table in {out / 'benchmark.tsv'}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CliError, CorpusError, SamplingError, ModelError, TrainingError, EvaluationError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"{type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
