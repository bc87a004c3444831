"""Command-line surface.

Subcommands:
    generate-synthetic  write a synthetic multi-city corpus to disk
    pretrain            masked-reconstruction pretraining on the sources
    build-bank          cluster patch embeddings into the pattern bank
    meta-train          meta-train the transfer parameters on source tasks
    finetune            adapt on the target city's few-shot window
    evaluate            score the test range (model + historical average)
    run                 the whole pipeline in order
    ablate              full model plus the four single-flag variants
    baseline-ha         historical-average metrics only

Every ExperimentConfig field is exposed as ``--<field-name>`` (dashes for
underscores); ``--config FILE`` loads a JSON config first and flags override
it. Exit status is 0 on success and 2 with the failing stage's name on a
pipeline error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import data as D
from . import experiment as X
from . import metrics as MT


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(X.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, dest=f.name, default=None, type=str)


_INT_TUPLES = {"scales", "horizons_minutes"}


def _coerce(name: str, value: str):
    if name in _INT_TUPLES:
        return tuple(int(v) for v in value.split(","))
    field = next(f for f in dataclasses.fields(X.ExperimentConfig)
                 if f.name == name)
    if field.type in ("int", "int | None"):
        return int(value)
    if field.type in ("float",):
        return float(value)
    return value


def build_config(args: argparse.Namespace) -> X.ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            raw.update(json.load(fh))
    for f in dataclasses.fields(X.ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is None:
            continue
        raw[f.name] = _coerce(f.name, v) if isinstance(v, str) else v
    return X.ExperimentConfig.from_dict(raw)


def _stage_command(stages: tuple[str, ...]):
    def handler(args: argparse.Namespace) -> int:
        cfg = build_config(args)
        res = X.run_experiment(cfg, args.run_dir, force=args.force, log=_say,
                               stages=stages)
        if res is not None:
            _print_metrics(res)
        return 0

    return handler


def _say(msg: str) -> None:
    print(msg, flush=True)


def _print_metrics(res: X.ExperimentResult) -> None:
    print(f"run directory: {res.run_dir}")
    print("horizon  model-RMSE  model-MAE  HA-RMSE")
    for row in res.metrics.rows:
        ha = res.metrics_ha.by_horizon(row.horizon_minutes)
        print(f"{row.horizon_minutes:>4} min  {row.rmse:>10.4f}  "
              f"{row.mae:>9.4f}  {ha.rmse:>8.4f}")


def cmd_generate_synthetic(args: argparse.Namespace) -> int:
    spec = D.SyntheticSpec(
        num_cities=args.num_cities, nodes_per_city=args.nodes_per_city,
        days=args.days, num_profiles=args.num_profiles,
        noise_std=args.noise_std, spatial_mix=args.spatial_mix,
        seed=args.seed, interval_minutes=args.interval_minutes)
    cities, info = D.generate_synthetic_corpus(spec)
    out = Path(args.out)
    for c in cities:
        D.save_city(c, out / c.name)
    with open(out / "planted_labels.json", "w") as fh:
        json.dump({k: v.tolist() for k, v in info["labels"].items()}, fh,
                  indent=2)
    print(f"wrote {len(cities)} cities to {out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    results = X.run_ablations(cfg, args.run_dir, force=args.force, log=_say)
    failed = [k for k, v in results.items()
              if not isinstance(v, MT.MetricsReport)]
    print(f"ablation table: {Path(args.run_dir) / 'ablations.csv'}")
    if failed:
        print(f"failed variants: {failed}", file=sys.stderr)
        return 1
    return 0


def cmd_baseline_ha(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sources, target = X.load_corpus(cfg, run_dir / "corpus")
    split = D.split_few_shot(target, cfg.few_shot_days, cfg.T0)
    from . import meta as M

    windows = M.forecast_windows(target, split.test_range[0],
                                 split.test_range[1], cfg.T0, cfg.P,
                                 cfg.horizon, cfg.eval_stride)
    import numpy as np

    origins = [w.origin for w in windows]
    pred = MT.ha_baseline(target, (0, split.few_shot_range[1]), origins,
                          cfg.horizon)
    truth = np.stack([w.Y for w in windows])
    rep = MT.compute_metrics(pred, truth, list(cfg.horizons_minutes),
                             cfg.base_interval_minutes, seed=cfg.seed,
                             label="ha")
    rep.write_csv(run_dir / "metrics_ha.csv")
    for row in rep.rows:
        print(f"HA {row.horizon_minutes:>4} min: RMSE {row.rmse:.4f} "
              f"MAE {row.mae:.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="patternbank",
        description="cross-city few-shot traffic forecasting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-synthetic",
                         help="write a synthetic corpus of city directories")
    gen.add_argument("--out", required=True)
    gen.add_argument("--num-cities", type=int, default=4)
    gen.add_argument("--nodes-per-city", type=int, default=20)
    gen.add_argument("--days", type=int, default=14)
    gen.add_argument("--num-profiles", type=int, default=3)
    gen.add_argument("--noise-std", type=float, default=4.0)
    gen.add_argument("--spatial-mix", type=float, default=0.3)
    gen.add_argument("--interval-minutes", type=int, default=5)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(handler=cmd_generate_synthetic)

    stage_map = {
        "pretrain": ("corpus", "pretrain"),
        "build-bank": ("corpus", "bank"),
        "meta-train": ("corpus", "meta"),
        "finetune": ("corpus", "finetune"),
        "evaluate": ("corpus", "evaluate"),
        "run": X.STAGE_ORDER,
    }
    for name, stages in stage_map.items():
        p = sub.add_parser(name, help=f"run the {name} step")
        p.add_argument("--run-dir", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--force", action="store_true",
                       help="ignore cached stage artifacts")
        _add_config_flags(p)
        p.set_defaults(handler=_stage_command(stages))

    abl = sub.add_parser("ablate", help="run the ablation variants")
    abl.add_argument("--run-dir", required=True)
    abl.add_argument("--config", default=None)
    abl.add_argument("--force", action="store_true")
    _add_config_flags(abl)
    abl.set_defaults(handler=cmd_ablate)

    ha = sub.add_parser("baseline-ha", help="historical-average metrics only")
    ha.add_argument("--run-dir", required=True)
    ha.add_argument("--config", default=None)
    _add_config_flags(ha)
    ha.set_defaults(handler=cmd_baseline_ha)

    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except X.StageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
