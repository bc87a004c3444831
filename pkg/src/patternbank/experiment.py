"""Experiment orchestration: a replayable configuration, cached pipeline
stages (corpus -> pretrain -> bank -> meta-train -> finetune -> evaluate),
and the ablation driver.

Run directory layout (stable):
    config.json    manifest.json
    corpus/        synthetic city directories (when no corpus_dir is given)
    checkpoints/   pretrain.npz bank.npz theta_meta.npz theta_final.npz
    traces/        pretrain_curve.csv cluster_report.csv meta_curve.csv
                   finetune_curve.csv
    matrices/      adjacency family dumps of one evaluation window
    figures/       rendered plots for every CSV the run emits
    metrics.csv    metrics_ha.csv    forecasts.csv

The manifest records the full config hash plus one hash per stage; a stage
re-runs only when its hash changed or its artifact is missing.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bank as BK
from . import data as D
from . import meta as M
from . import metrics as MT
from . import pretrain as PT
from . import report
from .forecast import AblationFlags, TransferModel
from .nn import LayerSpec

ABLATION_VARIANTS = ("no_meta", "no_st_decoder", "short_only_patterns",
                     "no_reconstruction")


@dataclass
class ExperimentConfig:
    """Every knob of one run; defaults follow the reference setup."""

    # corpus: either a directory of city subdirectories or a synthetic spec
    corpus_dir: str | None = None
    target_city: str | None = None  # default: last city in the corpus
    few_shot_days: int = 3
    base_interval_minutes: int = 5
    synthetic_num_cities: int = 4
    synthetic_nodes_per_city: int = 20
    synthetic_days: int = 14
    synthetic_num_profiles: int = 3
    synthetic_noise_std: float = 4.0
    synthetic_spatial_mix: float = 0.3

    # window geometry and model widths
    T0: int = 288
    P: int = 12
    horizon: int = 36
    scales: tuple[int, ...] = (1, 3, 6, 12, 24)
    K: int = 10
    gamma: float = 10.0
    d: int = 128
    d_q: int = 128
    heads: int = 4
    ff_width: int | None = None
    enc_depth: int = 2
    dec_depth: int = 1
    mask_ratio: float = 0.75

    # pretraining
    pretrain_lr: float = 1e-4
    pretrain_epochs: int = 50
    pretrain_patience: int = 10
    decoder_variant: str = "T+S+T"

    # meta-training and fine-tuning
    alpha: float = 5e-4
    beta: float = 5e-4
    update_step: int = 2
    meta_epochs: int = 20
    tasks_per_epoch: int = 2
    finetune_epochs: int = 200
    finetune_lr: float = 1e-3
    finetune_weight_decay: float = 1e-2

    # evaluation
    horizons_minutes: tuple[int, ...] = (10, 60, 120, 180)
    eval_stride: int = 36
    train_stride: int = 36

    # behavior switches
    softmax_scores: bool = True
    query_with_embeddings: bool = False
    no_meta: bool = False
    no_st_decoder: bool = False
    short_only_patterns: bool = False
    no_reconstruction: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        d["horizons_minutes"] = list(self.horizons_minutes)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(raw)
        if "scales" in kwargs:
            kwargs["scales"] = tuple(kwargs["scales"])
        if "horizons_minutes" in kwargs:
            kwargs["horizons_minutes"] = tuple(kwargs["horizons_minutes"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    # ablation-resolved values
    @property
    def effective_decoder_variant(self) -> str:
        return "T" if self.no_st_decoder else self.decoder_variant

    @property
    def effective_scales(self) -> tuple[int, ...]:
        return (1,) if self.short_only_patterns else self.scales

    def layer_spec(self) -> LayerSpec:
        return LayerSpec(d=self.d, d_q=self.d_q, heads=self.heads,
                         ff_width=self.ff_width, enc_depth=self.enc_depth,
                         dec_depth=self.dec_depth)

    def flags(self) -> AblationFlags:
        return AblationFlags(no_meta=self.no_meta,
                             no_st_decoder=self.no_st_decoder,
                             short_only_patterns=self.short_only_patterns,
                             no_reconstruction=self.no_reconstruction)


def _hash_obj(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def config_hash(cfg: ExperimentConfig) -> str:
    return _hash_obj(cfg.to_dict())


def stage_hash(cfg: ExperimentConfig, stage: str, upstream: str = "") -> str:
    c = cfg.to_dict()
    fields_by_stage = {
        "corpus": ["corpus_dir", "target_city", "few_shot_days",
                   "base_interval_minutes", "seed"] +
                  [k for k in c if k.startswith("synthetic_")],
        "pretrain": ["T0", "P", "mask_ratio", "d", "d_q", "heads", "ff_width",
                     "enc_depth", "dec_depth", "pretrain_lr", "pretrain_epochs",
                     "pretrain_patience", "decoder_variant", "no_st_decoder",
                     "seed"],
        "bank": ["K", "scales", "short_only_patterns", "seed"],
        "meta": ["alpha", "beta", "update_step", "meta_epochs",
                 "tasks_per_epoch", "gamma", "horizon", "softmax_scores",
                 "query_with_embeddings", "no_meta", "no_reconstruction",
                 "train_stride", "seed"],
        "finetune": ["finetune_epochs", "finetune_lr", "finetune_weight_decay",
                     "few_shot_days", "seed"],
        "evaluate": ["horizons_minutes", "eval_stride"],
    }
    subset = {k: c[k] for k in fields_by_stage[stage]}
    subset["__stage__"] = stage
    subset["__upstream__"] = upstream
    return _hash_obj(subset)


STAGE_ORDER = ("corpus", "pretrain", "bank", "meta", "finetune", "evaluate")


def stage_hashes(cfg: ExperimentConfig) -> dict[str, str]:
    """The chained per-stage hashes, independent of which stages run."""
    out = {}
    upstream = ""
    for stage in STAGE_ORDER:
        upstream = stage_hash(cfg, stage, upstream)
        out[stage] = upstream
    return out


class Manifest:
    """manifest.json: config hash, per-stage hashes, seeds, artifacts."""

    def __init__(self, path: Path):
        self.path = path
        self.data = {"config_hash": None, "stages": {}}
        if path.exists():
            with open(path) as fh:
                self.data = json.load(fh)

    def save(self) -> None:
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)

    def stage_current(self, name: str, h: str, artifacts: list[Path]) -> bool:
        rec = self.data["stages"].get(name)
        return (rec is not None and rec.get("hash") == h and
                all(p.exists() for p in artifacts))

    def record_stage(self, name: str, h: str, artifacts: list[Path],
                     extra: dict | None = None) -> None:
        self.data["stages"][name] = {"hash": h,
                                     "artifacts": [str(p) for p in artifacts],
                                     **(extra or {})}
        self.save()


@dataclass
class StageError(RuntimeError):
    stage: str
    cause: Exception

    def __str__(self):
        return f"stage {self.stage} failed: {self.cause}"


@dataclass
class ExperimentResult:
    run_dir: Path
    metrics: MT.MetricsReport
    metrics_ha: MT.MetricsReport
    config: ExperimentConfig


def load_corpus(cfg: ExperimentConfig, corpus_dir: Path
                ) -> tuple[list[D.CityDataset], D.CityDataset]:
    """Materialize the corpus and split it into sources and target."""
    if cfg.corpus_dir is not None:
        root = Path(cfg.corpus_dir)
        dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
        if len(dirs) < 2:
            raise ValueError(f"corpus at {root} needs at least 2 cities")
        cities = [D.load_city(p) for p in dirs]
    else:
        spec = D.SyntheticSpec(
            num_cities=cfg.synthetic_num_cities,
            nodes_per_city=cfg.synthetic_nodes_per_city,
            days=cfg.synthetic_days, num_profiles=cfg.synthetic_num_profiles,
            noise_std=cfg.synthetic_noise_std,
            spatial_mix=cfg.synthetic_spatial_mix, seed=cfg.seed,
            interval_minutes=cfg.base_interval_minutes)
        cities, _ = D.generate_synthetic_corpus(spec)
        corpus_dir.mkdir(parents=True, exist_ok=True)
        for c in cities:
            D.save_city(c, corpus_dir / c.name)
    cities = [D.resample_to_base_interval(c, cfg.base_interval_minutes)
              for c in cities]
    names = [c.name for c in cities]
    target_name = cfg.target_city if cfg.target_city is not None else names[-1]
    if target_name not in names:
        raise ValueError(f"target city {target_name!r} not in corpus {names}")
    target = cities[names.index(target_name)]
    sources = [c for c in cities if c.name != target_name]
    return sources, target


def _build_model(cfg: ExperimentConfig, pretrain_path: Path,
                 bank_path: Path) -> TransferModel:
    enc, dec = PT.load_pretrained(pretrain_path)
    bank = BK.load_bank(bank_path)
    model = TransferModel(enc.store, enc.spec, bank, enc, dec, cfg.T0, cfg.P,
                          cfg.horizon, cfg.gamma, flags=cfg.flags(),
                          softmax_scores=cfg.softmax_scores,
                          query_with_embeddings=cfg.query_with_embeddings)
    model.init_params(np.random.default_rng(cfg.seed))
    return model


def _write_trace(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def run_experiment(cfg: ExperimentConfig, run_dir: str | Path,
                   force: bool = False, log=None,
                   stages: tuple[str, ...] = ("corpus", "pretrain", "bank",
                                              "meta", "finetune", "evaluate"),
                   ) -> ExperimentResult | None:
    """Execute (or resume) the pipeline; returns metrics after 'evaluate'."""
    run_dir = Path(run_dir)
    for sub in ("checkpoints", "traces", "matrices", "figures"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    manifest = Manifest(run_dir / "manifest.json")
    manifest.data["config_hash"] = config_hash(cfg)
    manifest.data["seed"] = cfg.seed
    manifest.save()

    say = log if log is not None else (lambda msg: None)
    corpus_dir = run_dir / "corpus"
    ckpt = run_dir / "checkpoints"
    traces = run_dir / "traces"

    hashes = stage_hashes(cfg)
    sources = target = None

    def ensure_corpus():
        nonlocal sources, target
        if sources is None:
            sources, target = load_corpus(cfg, corpus_dir)

    result_metrics = result_ha = None
    for stage in stages:
        h = hashes[stage]
        try:
            if stage == "corpus":
                ensure_corpus()
                manifest.record_stage(stage, h, [])
            elif stage == "pretrain":
                art = ckpt / "pretrain.npz"
                if not force and manifest.stage_current(stage, h, [art]):
                    say("pretrain: cached")
                else:
                    ensure_corpus()
                    say("pretrain: training")
                    pcfg = PT.PretrainConfig(
                        T0=cfg.T0, P=cfg.P, mask_ratio=cfg.mask_ratio,
                        lr=cfg.pretrain_lr, epochs=cfg.pretrain_epochs,
                        patience=cfg.pretrain_patience,
                        decoder_variant=cfg.effective_decoder_variant,
                        seed=cfg.seed)
                    res = PT.pretrain(sources, pcfg, cfg.layer_spec(), log=say)
                    PT.save_pretrained(res, art)
                    res.write_curve(traces / "pretrain_curve.csv")
                    report.render_pretrain_curve(
                        traces / "pretrain_curve.csv",
                        run_dir / "figures" / "pretrain_curve.png")
                    manifest.record_stage(stage, h, [art])
            elif stage == "bank":
                art = ckpt / "bank.npz"
                if not force and manifest.stage_current(stage, h, [art]):
                    say("bank: cached")
                else:
                    ensure_corpus()
                    say("bank: clustering")
                    enc, dec = PT.load_pretrained(ckpt / "pretrain.npz")
                    bank, rep = BK.build_bank(
                        sources, enc, dec, cfg.T0, cfg.P,
                        scales=cfg.effective_scales, K=cfg.K, seed=cfg.seed,
                        provenance={"pretrain": manifest.data["stages"]
                                    ["pretrain"]["hash"], "seed": cfg.seed})
                    BK.save_bank(bank, art)
                    rep.write_csv(traces / "cluster_report.csv")
                    report.render_cluster_report(
                        rep, run_dir / "figures" / "silhouette_by_scale.png")
                    manifest.record_stage(stage, h, [art])
            elif stage == "meta":
                art = ckpt / "theta_meta.npz"
                if not force and manifest.stage_current(stage, h, [art]):
                    say("meta: cached")
                else:
                    ensure_corpus()
                    say("meta: training")
                    model = _build_model(cfg, ckpt / "pretrain.npz",
                                         ckpt / "bank.npz")
                    mcfg = _meta_config(cfg)
                    trace = M.meta_train(model, sources, mcfg, log=say)
                    model.store.save(art, prefix="transfer/")
                    _write_trace(traces / "meta_curve.csv", trace)
                    report.render_loss_trace(
                        traces / "meta_curve.csv", "query_loss",
                        run_dir / "figures" / "meta_curve.png")
                    manifest.record_stage(stage, h, [art])
            elif stage == "finetune":
                art = ckpt / "theta_final.npz"
                if not force and manifest.stage_current(stage, h, [art]):
                    say("finetune: cached")
                else:
                    ensure_corpus()
                    say("finetune: adapting on few-shot data")
                    model = _build_model(cfg, ckpt / "pretrain.npz",
                                         ckpt / "bank.npz")
                    model.store.load(ckpt / "theta_meta.npz")
                    split = D.split_few_shot(target, cfg.few_shot_days, cfg.T0)
                    windows = M.forecast_windows(
                        target, split.few_shot_range[0], split.few_shot_range[1],
                        cfg.T0, cfg.P, cfg.horizon, cfg.train_stride)
                    trace = M.finetune(model, windows, target.adjacency,
                                       _meta_config(cfg), log=say)
                    model.store.save(art, prefix="transfer/")
                    _write_trace(traces / "finetune_curve.csv", trace)
                    report.render_loss_trace(
                        traces / "finetune_curve.csv", "train_loss",
                        run_dir / "figures" / "finetune_curve.png")
                    manifest.record_stage(stage, h, [art])
            elif stage == "evaluate":
                ensure_corpus()
                say("evaluate: scoring the test range")
                model = _build_model(cfg, ckpt / "pretrain.npz",
                                     ckpt / "bank.npz")
                model.store.load(ckpt / "theta_final.npz")
                result_metrics, result_ha = _evaluate(cfg, model, target,
                                                      run_dir)
                manifest.record_stage(stage, h, [run_dir / "metrics.csv"])
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - stage name must surface
            raise StageError(stage, exc) from exc
    if result_metrics is None:
        return None
    return ExperimentResult(run_dir, result_metrics, result_ha, cfg)


def _meta_config(cfg: ExperimentConfig) -> M.MetaConfig:
    return M.MetaConfig(alpha=cfg.alpha, beta=cfg.beta,
                        update_step=cfg.update_step,
                        meta_epochs=cfg.meta_epochs,
                        tasks_per_epoch=cfg.tasks_per_epoch,
                        finetune_epochs=cfg.finetune_epochs,
                        finetune_lr=cfg.finetune_lr,
                        finetune_weight_decay=cfg.finetune_weight_decay,
                        seed=cfg.seed)


def _evaluate(cfg: ExperimentConfig, model: TransferModel,
              target: D.CityDataset, run_dir: Path
              ) -> tuple[MT.MetricsReport, MT.MetricsReport]:
    split = D.split_few_shot(target, cfg.few_shot_days, cfg.T0)
    windows = M.forecast_windows(target, split.test_range[0],
                                 split.test_range[1], cfg.T0, cfg.P,
                                 cfg.horizon, cfg.eval_stride)
    if not windows:
        raise ValueError("test range too short for a single forecast window")
    preds = np.stack([model.predict(w, target.adjacency) for w in windows])
    truth = np.stack([w.Y for w in windows])
    label = "full" if not any(dataclasses.asdict(cfg.flags()).values()) else \
        "+".join(k for k, v in dataclasses.asdict(cfg.flags()).items() if v)
    rep = MT.compute_metrics(preds, truth, list(cfg.horizons_minutes),
                             cfg.base_interval_minutes, seed=cfg.seed,
                             label=label)
    rep.write_csv(run_dir / "metrics.csv")

    origins = [w.origin for w in windows]
    ha_pred = MT.ha_baseline(target, (0, split.few_shot_range[1]), origins,
                             cfg.horizon)
    rep_ha = MT.compute_metrics(ha_pred, truth, list(cfg.horizons_minutes),
                                cfg.base_interval_minutes, seed=cfg.seed,
                                label="ha")
    rep_ha.write_csv(run_dir / "metrics_ha.csv")

    _dump_forecasts(run_dir / "forecasts.csv", windows, preds)
    _dump_matrices(run_dir / "matrices", model, windows[0], target)
    report.render_metrics_comparison(
        {"model": rep, "ha": rep_ha},
        run_dir / "figures" / "metrics_by_horizon.png")
    report.render_forecast_examples(
        windows, preds, cfg.base_interval_minutes,
        run_dir / "figures" / "forecast_examples.png")
    report.render_adjacency_heatmaps(
        run_dir / "matrices", run_dir / "figures" / "adjacency.png")
    return rep, rep_ha


def _dump_forecasts(path: Path, windows, preds: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "origin_step", "horizon_step", "prediction", "truth"])
        for wi, win in enumerate(windows):
            N, T, _ = win.Y.shape
            for i in range(N):
                for t in range(T):
                    w.writerow([i, win.origin, t + 1,
                                f"{preds[wi, i, t, 0]:.10g}",
                                f"{win.Y[i, t, 0]:.10g}"])


def _dump_matrices(mat_dir: Path, model: TransferModel, window,
                   target: D.CityDataset) -> None:
    from .nn import autodiff as ad

    with ad.no_grad():
        _, info = model.forward(window, target.adjacency)
    adj = info["adjacency"]
    np.savetxt(mat_dir / "A.csv", adj.raw, delimiter=",", fmt="%.10g")
    np.savetxt(mat_dir / "A_attention.csv", adj.attention.data, delimiter=",",
               fmt="%.10g")
    np.savetxt(mat_dir / "C.csv", adj.coefficients.data, delimiter=",",
               fmt="%.10g")
    np.savetxt(mat_dir / "A_hat.csv", adj.reconstructed.data, delimiter=",",
               fmt="%.10g")
    np.savetxt(mat_dir / "A_operator.csv", adj.operator.data, delimiter=",",
               fmt="%.10g")
    np.savetxt(mat_dir / "Z.csv", info["Z"].data, delimiter=",", fmt="%.10g")


def run_ablations(cfg: ExperimentConfig, out_dir: str | Path,
                  force: bool = False, log=None) -> dict[str, object]:
    """The full model plus the four single-flag variants, tabulated."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    say = log if log is not None else (lambda msg: None)
    results: dict[str, object] = {}
    variants = [("full", {})] + [(name, {name: True}) for name in
                                 ABLATION_VARIANTS]
    for name, overrides in variants:
        vcfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
        say(f"ablation variant: {name}")
        try:
            res = run_experiment(vcfg, out_dir / name, force=force, log=log)
            results[name] = res.metrics
        except StageError as exc:
            say(f"variant {name} failed: {exc}")
            results[name] = exc
    _write_ablation_table(out_dir / "ablations.csv", results,
                          list(cfg.horizons_minutes))
    reports = {k: v for k, v in results.items()
               if isinstance(v, MT.MetricsReport)}
    if reports:
        report.render_metrics_comparison(
            reports, out_dir / "ablation_rmse.png")
    return results


def _write_ablation_table(path: Path, results: dict,
                          horizons: list[int]) -> None:
    full = results.get("full")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "horizon_minutes", "rmse", "mae",
                    "rmse_delta_vs_full", "status"])
        for name, rep in results.items():
            if not isinstance(rep, MT.MetricsReport):
                w.writerow([name, "", "", "", "", f"failed: {rep}"])
                continue
            for h in horizons:
                row = rep.by_horizon(h)
                delta = ""
                if isinstance(full, MT.MetricsReport) and name != "full":
                    delta = f"{row.rmse - full.by_horizon(h).rmse:.10g}"
                w.writerow([name, h, f"{row.rmse:.10g}", f"{row.mae:.10g}",
                            delta, "ok"])
