"""Command-line entry point.

Subcommands: generate | train | evaluate | compare | gradcheck. Every run
writes a manifest (config, seeds, version, fold plan where applicable)
sufficient to reproduce its outputs bit-identically.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 failed checks.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, baselines, data, harness, metrics, mov
from .data import IngestionError, SyntheticConfig, ViewSchema
from .mov import TrainConfig
from .nn import ConfigError, NumericError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    fields = {
        k: cfg[k]
        for k in (
            "lam", "max_epochs", "batch_size", "learning_rate", "beta1", "beta2",
            "epsilon", "plateau_patience", "plateau_factor", "early_stop_patience",
            "dropout_rate", "gate_dropout", "freeze_gate",
        )
        if k in cfg
    }
    return TrainConfig(seed=seed, **fields)


def _write_manifest(out: Path, args: argparse.Namespace, cfg: dict, extra: dict | None = None) -> None:
    manifest = {
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "config": cfg,
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _synthetic_config(cfg: dict, seed: int) -> SyntheticConfig:
    s = cfg.get("synthetic", {})
    return SyntheticConfig(
        n_samples=s.get("n_samples", 1400),
        view_dims=tuple(s.get("view_dims", [14, 14])),
        separation=s.get("separation", 2.8),
        informative_prior=tuple(s.get("informative_prior", [0.5, 0.5])),
        noise_std=s.get("noise_std", 0.4),
        n_classes=s.get("n_classes", 2),
        seed=s.get("seed", seed),
    )


def _load_dataset(cfg: dict, seed: int):
    if "csv" in cfg:
        class_names = tuple(cfg["class_names"]) if "class_names" in cfg else None
        return data.load_csv(cfg["csv"], class_names=class_names)
    sc = _synthetic_config(cfg, seed)
    return data.generate_synthetic(sc), sc.schema()


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = _synthetic_config(cfg, args.seed)
    samples = data.generate_synthetic(sc)
    schema = sc.schema()
    data.save_csv(out / "dataset.csv", samples, schema)
    counts = np.bincount(
        [s.informative_view for s in samples], minlength=len(sc.view_dims)
    )
    sidecar = {
        "informative_view_counts": counts.tolist(),
        "config": asdict(sc) | {"view_dims": list(sc.view_dims),
                                "informative_prior": list(sc.informative_prior)},
    }
    (out / "ground_truth.json").write_text(json.dumps(sidecar, indent=2))
    _write_manifest(out, args, cfg)
    print(f"wrote {out/'dataset.csv'} ({len(samples)} samples)")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples, schema = _load_dataset(cfg, args.seed)
    tc = _train_config(cfg, args.seed)
    plan_seed = args.seed
    idx = np.arange(len(samples))
    inner, val = data.carve_validation(samples, idx, cfg.get("val_fraction", 0.1), plan_seed)
    if cfg.get("standardize", True):
        stats = data.fit_standardizer(data.subset(samples, inner))
        samples = data.apply_standardizer(stats, samples)
    train_batch = data.to_batch(data.subset(samples, inner))
    val_batch = data.to_batch(data.subset(samples, val))
    model_name = cfg.get("model", "mov")
    hidden = tuple(cfg.get("hidden", [24, 24]))
    gate_hidden = tuple(cfg.get("gate_hidden", [3, 3]))
    model, history, _ = harness.train_and_score(
        model_name, schema, train_batch, val_batch, None, tc,
        gate_hidden=gate_hidden, default_hidden=hidden, seed=args.seed,
    )
    meta = {
        "kind": model.kind,
        "view_index": model.view_index,
        "lam": tc.lam,
        "seed": args.seed,
        "class_names": list(schema.class_names),
        "view_names": list(schema.view_names),
    }
    mov.save_checkpoint(out / "model.mov1", model.params, meta)
    (out / "history.json").write_text(json.dumps({
        "train_loss": history.train_loss,
        "val_loss": history.val_loss,
        "learning_rate": history.learning_rate,
        "best_epoch": history.best_epoch,
    }, indent=2))
    _write_manifest(out, args, cfg)
    print(f"trained {model.kind}: best val NLL "
          f"{min(history.val_loss):.4f} at epoch {history.best_epoch}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, header = mov.load_checkpoint(cfg["checkpoint"])
    class_names = tuple(header.get("class_names", ["0", "1"]))
    samples, schema = data.load_csv(cfg["csv"], class_names=class_names)
    model = baselines.FusionModel(
        kind=header.get("kind", "mov"), params=params,
        view_index=header.get("view_index"),
    )
    expected_dims = model.adapt([np.zeros(d) for d in schema.view_dims])
    if tuple(v.shape[-1] for v in expected_dims) != params.view_dims:
        raise ConfigError(
            f"checkpoint expects view dims {params.view_dims}, dataset provides "
            f"{tuple(v.shape[-1] for v in expected_dims)}"
        )
    if cfg.get("standardize", True):
        stats = data.fit_standardizer(samples)
        samples = data.apply_standardizer(stats, samples)
    batch = data.to_batch(samples)
    proba = model.predict_proba(batch[0])
    preds = metrics.ScoredPredictions(
        ids=tuple(s.id for s in samples),
        labels=(batch[1] == 1).astype(np.int64),
        scores=proba[:, 1],
    )
    report = metrics.evaluate(preds)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out / f"roc_{model.kind}.csv").write_text(metrics.roc_csv(report.roc))
    if model.kind in ("mov", "avg"):
        gates = model.gate_weights(batch[0])
        lines = ["id," + ",".join(f"w{i}" for i in range(gates.shape[1]))]
        lines += [
            s.id + "," + ",".join(repr(float(w)) for w in gates[i])
            for i, s in enumerate(samples)
        ]
        (out / "gates.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out, args, cfg)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples, schema = _load_dataset(cfg, args.seed)
    if "group" in cfg:
        samples = [s for s in samples if s.group == cfg["group"]]
    tc = _train_config(cfg, args.seed)
    sweep = None
    if cfg.get("sweep"):
        g = cfg["sweep"] if isinstance(cfg["sweep"], dict) else {}
        sweep = harness.SweepGrid(
            hidden_sizes=tuple(g.get("hidden_sizes", (12, 24, 48))),
            n_layers=tuple(g.get("n_layers", (1, 2))),
            lam=tuple(g.get("lam", (0.0, 0.5, 1.0, 2.0))),
            dropout=tuple(g.get("dropout", (0.0, 0.5))),
        )
    result = harness.run_compare(
        samples, schema,
        k_folds=cfg.get("k_folds", 10),
        base_config=tc,
        val_fraction=cfg.get("val_fraction", 0.1),
        master_seed=args.seed,
        sweep=sweep,
        standardize=cfg.get("standardize", True),
        gate_hidden=tuple(cfg.get("gate_hidden", [3, 3])),
        default_hidden=tuple(cfg.get("hidden", [24, 24])),
        workers=args.workers,
    )
    report = {
        "positive_class": schema.class_names[1],
        "models": {
            name: {"mean": s.mean, "std": s.std, "pooled_auc": s.pooled_report.auc}
            for name, s in result.summaries.items()
        },
        "delong_vs_mov": {
            name: {"auc_mov": r.auc_a, "auc_baseline": r.auc_b,
                   "z": r.z, "p_value": r.p_value}
            for name, r in result.delong.items()
        },
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    for name, s in result.summaries.items():
        safe = name.replace(":", "_")
        (out / f"roc_{safe}.csv").write_text(metrics.roc_csv(s.pooled_report.roc))
    gate_rows = [(rid, w) for f in result.folds for rid, w in f.gate_rows]
    if gate_rows:
        m = len(gate_rows[0][1])
        lines = ["id," + ",".join(f"w{i}" for i in range(m))]
        lines += [rid + "," + ",".join(repr(float(x)) for x in w) for rid, w in gate_rows]
        (out / "gates.csv").write_text("\n".join(lines) + "\n")
    (out / "fold_plan.json").write_text(result.fold_plan.to_json(samples))
    _write_manifest(out, args, cfg)
    for name, s in result.summaries.items():
        print(f"{name:>12}: acc {s.mean['accuracy']:.3f}  "
              f"F {s.mean['f_measure']:.3f}  AUC {s.mean['auc']:.3f}")
    for name, r in result.delong.items():
        print(f"DeLong mov vs {name}: z={r.z:.3f} p={r.p_value:.4g}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check of the analytic gradients over random small
    configurations, across lambda in {0, 1, 5}."""
    rng = np.random.default_rng(args.seed)
    worst = {"gate": 0.0, "experts": 0.0}
    for trial in range(args.trials):
        m = int(rng.integers(2, 4))
        dims = [int(rng.integers(2, 5)) for _ in range(m)]
        k = 2
        params = mov.init_mov(dims, k, expert_hidden=(4,), gate_hidden=(3,),
                              seed=int(rng.integers(2**31)))
        n = int(rng.integers(2, 6))
        views = [rng.standard_normal((n, d)) for d in dims]
        labels = rng.integers(k, size=n)
        for lam in (0.0, 1.0, 5.0):
            _, grads = mov.backward(params, (views, labels), lam)
            fd = mov.finite_diff_mov(
                lambda p: mov.composite_loss(p, (views, labels), lam), params, 1e-5
            )
            ga, gf = mov.flatten_mov(grads), mov.flatten_mov(fd)
            denom = np.maximum(np.abs(gf), 1e-8)
            rel = np.abs(ga - gf) / denom
            gate_size = mov.nn.flatten_params(params.gate).size
            worst["gate"] = max(worst["gate"], float(rel[:gate_size].max()))
            worst["experts"] = max(worst["experts"], float(rel[gate_size:].max()))
    ok = all(v < 1e-6 for v in worst.values())
    for block, err in worst.items():
        print(f"{block}: worst relative error {err:.3e}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixview", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("generate", cmd_generate), ("train", cmd_train),
        ("evaluate", cmd_evaluate), ("compare", cmd_compare),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", default="out")
        sp.set_defaults(func=fn)
    gp = sub.add_parser("gradcheck")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--trials", type=int, default=20)
    gp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, mov.CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
