"""Operator-facing command line.

Commands are thin shells over one library operation each::

    synth            generate a synthetic KPI stream as delimited text
    preprocess       raw log -> SequenceDataset directory
    train-extractor  stage one: H-score training, frozen checkpoint
    embed            frozen checkpoint + dataset -> embeddings file
    train-predictor  stage two: MLP on embeddings for one target KPI
    benchmark        all four conditions x targets -> EvalReport
    sweep-dim        repeat the protocol across embedding dimensions
    report           render an EvalReport as a table / bar chart

Every command writes its artifacts under one output directory together with
the fully resolved config and content hashes of its inputs, so identical
configs and inputs reproduce identical artifacts byte for byte (wall-clock
timings go to a separate ``timing.json``).  Exit codes: 0 success, 1
data/contract errors, 2 usage errors.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import models, pipeline, preprocess, synthdata
from .errors import ConfigError, DataError, KpiEmbedError

ENV_OUTPUT_ROOT = "KPIEMBED_OUT"


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_text(text):
    return hashlib.sha256(text.encode()).hexdigest()


def _out_dir(args, command):
    if args.out:
        path = Path(args.out)
    else:
        root = os.environ.get(ENV_OUTPUT_ROOT, "runs")
        path = Path(root) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out, cfg, inputs):
    (out / "resolved_config.json").write_text(cfg.to_json())
    manifest = {"inputs": inputs, "config_fingerprint": _sha256_text(cfg.to_json())}
    (out / "inputs.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _resolve(args, overrides=None):
    return cfgmod.resolve_config(config_path=args.config, preset=args.preset,
                                 overrides=overrides or {})


def _load_or_make_dataset(args, cfg, out, inputs):
    """Dataset from --data dir, a csv source, or the synth generator."""
    if getattr(args, "data", None):
        ds = preprocess.load_dataset(args.data)
        for name in ("meta.json", "inputs.npy", "targets.npy", "steps.npy"):
            inputs[f"dataset/{name}"] = _sha256_file(Path(args.data) / name)
        return ds
    if cfg.data.source == "csv":
        if not cfg.data.path:
            raise ConfigError("data.source is 'csv' but data.path is not set")
        inputs["csv"] = _sha256_file(cfg.data.path)
        parsed = preprocess.parse_kpi_log(cfg.data.path, schema=cfg.data.schema)
        pc = cfg.preprocess
        ds, _ = preprocess.run_pipeline(
            parsed.records, window_len=pc.window_len_ms, t_step=pc.t_step_ms,
            lower_pct=pc.lower_pct, upper_pct=pc.upper_pct, n_seq=pc.n_seq,
            dropped_unparseable=parsed.dropped_rows)
        return ds
    synth = cfg.data.synth
    inputs["synth_config"] = _sha256_text(json.dumps(
        cfgmod.dataclasses.asdict(synth), sort_keys=True))
    pc = cfg.preprocess
    return synthdata.generate_labeled_dataset(
        cfg.latent_config(), synthdata.KpiMarginalSpec.table_default(),
        synth.n_samples, window_len=pc.window_len_ms, t_step=pc.t_step_ms,
        lower_pct=pc.lower_pct, upper_pct=pc.upper_pct, n_seq=pc.n_seq)


def _deterministic_savefig(fig, path):
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "kpiembed"
    fig.savefig(path, format="svg", metadata={"Date": None})


# -- commands -----------------------------------------------------------------------

def cmd_synth(args):
    cfg = _resolve(args)
    out = _out_dir(args, "synth")
    duration = args.duration_ms
    if duration is None:
        # enough raw steps to cover the configured sample count
        duration = (cfg.data.synth.n_samples + cfg.preprocess.n_seq + 50) * synthdata.T_STEP_MS
    records = synthdata.generate_stream(
        cfg.latent_config(), synthdata.KpiMarginalSpec.table_default(), duration)
    stream = out / "stream.csv"
    preprocess.write_kpi_log(records, stream)
    _write_manifest(out, cfg, {"stream.csv": _sha256_file(stream)})
    print(f"wrote {len(records)} records to {stream}")
    return 0


def cmd_preprocess(args):
    cfg = _resolve(args)
    out = _out_dir(args, "preprocess")
    inputs = {"csv": _sha256_file(args.input)}
    parsed = preprocess.parse_kpi_log(args.input, schema=cfg.data.schema)
    pc = cfg.preprocess
    ds, report = preprocess.run_pipeline(
        parsed.records, window_len=pc.window_len_ms, t_step=pc.t_step_ms,
        lower_pct=pc.lower_pct, upper_pct=pc.upper_pct, n_seq=pc.n_seq,
        dropped_unparseable=parsed.dropped_rows)
    preprocess.save_dataset(ds, out / "dataset", provenance={"input_sha256": inputs["csv"]})
    (out / "preprocess_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True))
    _write_manifest(out, cfg, inputs)
    print(f"dataset with {ds.n_samples} samples -> {out / 'dataset'}")
    return 0


def cmd_train_extractor(args):
    cfg = _resolve(args, {"model": {"arch": args.arch}} if args.arch else None)
    out = _out_dir(args, "train-extractor")
    inputs = {}
    ds = _load_or_make_dataset(args, cfg, out, inputs)
    tcfg = cfg.train_config(seed=args.seed).resolved()
    train_raw, _ = pipeline.split_dataset(ds, tcfg)
    full_norm = preprocess.normalize_dataset(ds, np.arange(train_raw.n_samples))
    train, _ = pipeline.split_dataset(full_norm, tcfg)
    extractor, history = pipeline.train_extractor(train, tcfg, arch=cfg.model.arch)
    models.save_checkpoint(extractor, out / "checkpoint",
                           normalization=full_norm.normalization.to_dict())
    (out / "history.json").write_text(json.dumps(
        {"h_initial": history.initial, "h_per_epoch": history.per_epoch},
        indent=2, sort_keys=True))
    _write_manifest(out, cfg, inputs)
    print(f"extractor ({cfg.model.arch}) frozen at H={history.final:.4f} -> {out / 'checkpoint'}")
    return 0


def cmd_embed(args):
    cfg = _resolve(args)
    out = _out_dir(args, "embed")
    inputs = {}
    ds = _load_or_make_dataset(args, cfg, out, inputs)
    extractor, meta = models.load_checkpoint(args.ckpt)
    inputs["checkpoint/meta.json"] = _sha256_file(Path(args.ckpt) / "meta.json")
    inputs["checkpoint/params.bin"] = _sha256_file(Path(args.ckpt) / "params.bin")
    norm = meta.get("normalization")
    arr = ds.inputs
    if norm:
        arr = preprocess.Normalization.from_dict(norm).apply(arr)
    emb = pipeline.embed_dataset(extractor, arr)
    np.save(out / "embeddings.npy", emb)
    _write_manifest(out, cfg, inputs)
    print(f"embeddings {emb.shape} -> {out / 'embeddings.npy'}")
    return 0


def cmd_train_predictor(args):
    cfg = _resolve(args)
    out = _out_dir(args, "train-predictor")
    inputs = {"embeddings": _sha256_file(args.embeddings)}
    ds = _load_or_make_dataset(args, cfg, out, inputs)
    emb = np.load(args.embeddings)
    if emb.shape[0] != ds.n_samples:
        raise DataError(
            f"embeddings ({emb.shape[0]}) and dataset ({ds.n_samples}) sample counts differ")
    tcfg = cfg.train_config(seed=args.seed).resolved()
    train_raw, _ = pipeline.split_dataset(ds, tcfg)
    n_train = train_raw.n_samples
    full_norm = preprocess.normalize_dataset(ds, np.arange(n_train))
    t_idx = pipeline.target_index(args.target)
    net, history = pipeline.train_predictor(
        emb[:n_train], full_norm.targets[:n_train, t_idx], tcfg)
    preds = pipeline._mlp_predict(net, emb[n_train:])[:, 0]
    metrics = pipeline.evaluate(preds, full_norm.targets[n_train:, t_idx])
    (out / "metrics.json").write_text(json.dumps(
        {"target": args.target, "train_mse_final": history.per_epoch[-1],
         "test": metrics.to_dict()}, indent=2, sort_keys=True))
    _write_manifest(out, cfg, inputs)
    print(f"predictor[{args.target}] test mse {metrics.mse:.6f} -> {out}")
    return 0


def _report_table(report):
    lines = ["condition\ttarget\tmse\tmse_raw\tpearson"]
    for condition in sorted(report["medians"]):
        for target in sorted(report["medians"][condition]):
            cell = report["medians"][condition][target]
            lines.append(f"{condition}\t{target}\t{cell['mse']:.6f}"
                         f"\t{cell['mse_raw']:.6f}\t{cell['pearson']:.4f}")
    return "\n".join(lines) + "\n"


def cmd_benchmark(args):
    overrides = {}
    if args.regime:
        overrides["train"] = {"regime": args.regime}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    elif args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    cfg = _resolve(args, overrides)
    out = _out_dir(args, "benchmark")
    inputs = {}
    ds = _load_or_make_dataset(args, cfg, out, inputs)
    report = pipeline.run_benchmark(ds, cfg.train_config(), seeds=cfg.seeds)
    (out / "report.json").write_text(report.to_json())
    (out / "timing.json").write_text(json.dumps(
        {"wall_times_s": report.wall_times}, indent=2, sort_keys=True))
    (out / "report.tsv").write_text(_report_table(json.loads(report.to_json())))
    _write_manifest(out, cfg, inputs)
    print(_report_table(json.loads(report.to_json())), end="")
    print(f"report -> {out / 'report.json'}")
    return 0


def cmd_sweep_dim(args):
    dims = [int(d) for d in args.dims.split(",")]
    overrides = {"seeds": [int(s) for s in args.seeds.split(",")]} if args.seeds else {}
    cfg = _resolve(args, overrides)
    out = _out_dir(args, "sweep-dim")
    inputs = {}
    ds = _load_or_make_dataset(args, cfg, out, inputs)
    rows = pipeline.dim_sweep(ds, dims, cfg.train_config(), seeds=cfg.seeds)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    table = "n\ttarget\tmse_median\n" + "\n".join(
        f"{r['n']}\t{r['target']}\t{r['mse_median']:.6f}" for r in rows) + "\n"
    (out / "sweep.tsv").write_text(table)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for target in sorted({r["target"] for r in rows}):
        pts = sorted((r["n"], r["mse_median"]) for r in rows if r["target"] == target)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=target)
    ax.set_xlabel("embedding dimension n")
    ax.set_ylabel("test MSE")
    ax.set_xscale("log", base=2)
    ax.legend()
    fig.tight_layout()
    _deterministic_savefig(fig, out / "sweep.svg")
    plt.close(fig)
    _write_manifest(out, cfg, inputs)
    print(table, end="")
    print(f"sweep -> {out / 'sweep.json'} (+ sweep.svg)")
    return 0


def cmd_report(args):
    report = json.loads(Path(args.report).read_text())
    table = _report_table(report)
    print(table, end="")
    if args.out:
        out = _out_dir(args, "report")
        (out / "report.tsv").write_text(table)

        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        conditions = sorted(report["medians"])
        targets = sorted(next(iter(report["medians"].values())))
        fig, axes = plt.subplots(1, len(targets), figsize=(4 * len(targets), 3.2))
        axes = np.atleast_1d(axes)
        for ax, target in zip(axes, targets):
            vals = [report["medians"][c][target]["mse"] for c in conditions]
            ax.bar(range(len(conditions)), vals)
            ax.set_xticks(range(len(conditions)))
            ax.set_xticklabels(conditions, rotation=30, ha="right", fontsize=7)
            ax.set_title(target)
            ax.set_ylabel("test MSE")
        fig.tight_layout()
        _deterministic_savefig(fig, out / "report.svg")
        plt.close(fig)
        print(f"table + plot -> {out}")
    return 0


# -- argument parsing ---------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="kpiembed",
        description="Task-aligned low-dimensional embeddings of KPI time series.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="run config JSON file")
        p.add_argument("--preset", choices=cfgmod.PRESETS,
                       help="shipped config preset (full/limited)")
        p.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT_ROOT}/<command>)")
        if data:
            p.add_argument("--data", help="SequenceDataset directory (from `preprocess`)")

    p = sub.add_parser("synth", help="generate a synthetic KPI stream CSV")
    common(p)
    p.add_argument("--duration-ms", type=float, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess", help="raw CSV log -> sequence dataset")
    common(p)
    p.add_argument("--input", required=True, help="delimited KPI log")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train-extractor", help="stage one: H-score training")
    common(p, data=True)
    p.add_argument("--arch", choices=("tesn", "esn"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train_extractor)

    p = sub.add_parser("embed", help="apply a frozen extractor to a dataset")
    common(p, data=True)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("train-predictor", help="stage two: MLP on embeddings")
    common(p, data=True)
    p.add_argument("--embeddings", required=True, help="embeddings .npy from `embed`")
    p.add_argument("--target", required=True, choices=list(preprocess.KPI_NAMES))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train_predictor)

    p = sub.add_parser("benchmark", help="all conditions x targets under a regime")
    common(p, data=True)
    p.add_argument("--regime", choices=("full", "limited"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("sweep-dim", help="repeat the protocol across embedding dims")
    common(p, data=True)
    p.add_argument("--dims", required=True, help="comma-separated dims, e.g. 2,4,8,16")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.set_defaults(fn=cmd_sweep_dim)

    p = sub.add_parser("report", help="render an EvalReport JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--out", help="also write table + bar chart here")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error ConfigError: {exc}", file=sys.stderr)
        return 2
    except KpiEmbedError as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error IOError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
