"""Experiment pipeline: config schema, artifact layout, and the seven
pipeline stages behind the CLI subcommands.

Every stage reads artifacts written by earlier stages and writes its own
under the output directory; reruns are byte-identical because all
randomness derives from the single config seed and all files are written
through the deterministic CSV/tensor writers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .csvio import write_csv
from .data import (
    MultimodalDataset,
    SplitSpec,
    SynthModality,
    SynthSpec,
    _read_tensor_block,
    _write_tensor_block,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split,
)
from .errors import ConfigError, PrerequisiteError
from .fusion import FusionPolicy, fit_fusion_policy, fuse
from .heads import (
    init_deterministic_head,
    init_variational_head,
    load_checkpoint,
    save_checkpoint,
)
from .linalg import RngStream, derive_seed
from .metrics import (
    density_histogram,
    micro_pr_curve,
    micro_roc_curve,
    ood_separation,
    topk_accuracy,
)
from .training import TrainConfig, train
from .uncertainty import (
    PredictionSet,
    load_prediction_dump,
    mc_dropout_predict,
    mc_predict,
    single_pass_predict,
    write_prediction_dump,
)

BAYESIAN_MODELS = ("variational", "mc_dropout")
ALL_MODELS = ("deterministic", "mc_dropout", "variational")
TRAINED_KINDS = ("variational", "deterministic")
SPLIT_NAMES = ("train", "val", "test")

# stage indices mixed into the global seed
_STAGE_INIT = 3
_STAGE_TRAIN = 4
_STAGE_PREDICT = 5


@dataclass(frozen=True)
class SynthModalityCfg:
    name: str
    dim: int
    separation: float
    noise: float
    ambiguous_frac: float = 0.0


@dataclass(frozen=True)
class OodCfg:
    num_classes: int = 8
    samples_per_class: int = 50
    seed_offset: int = 7919


@dataclass(frozen=True)
class SynthCfg:
    num_classes: int = 8
    samples_per_class: int = 200
    modalities: tuple[SynthModalityCfg, ...] = ()
    ood: OodCfg = field(default_factory=OodCfg)


@dataclass(frozen=True)
class SplitCfg:
    train_frac: float = 0.7
    val_frac: float = 0.15
    test_frac: float = 0.15
    stratified: bool = True


@dataclass(frozen=True)
class HeadsCfg:
    hidden_dims: tuple[int, int] = (128, 64)
    prior_mean: float = 0.0
    prior_sigma: float = 1.0
    dropout_p: float = 0.5


@dataclass(frozen=True)
class TrainCfg:
    learning_rate: float = 0.0001
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 40
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    kl_scale: float | None = None
    mc_train_samples: int = 1


@dataclass(frozen=True)
class PredictCfg:
    mc_passes: int = 40
    splits: tuple[str, ...] = ("val", "test", "ood")
    models: tuple[str, ...] = ALL_MODELS


@dataclass(frozen=True)
class FusionCfg:
    metric: str = "bald"
    mode: str = "raw"


@dataclass(frozen=True)
class ReportCfg:
    histogram_bins: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str | None = None
    threads: int | None = None  # accepted cap; current implementation is single-threaded
    synth: SynthCfg = field(default_factory=SynthCfg)
    split: SplitCfg = field(default_factory=SplitCfg)
    heads: HeadsCfg = field(default_factory=HeadsCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    predict: PredictCfg = field(default_factory=PredictCfg)
    fusion: FusionCfg = field(default_factory=FusionCfg)
    report: ReportCfg = field(default_factory=ReportCfg)

    def modality_names(self) -> list[str]:
        return [m.name for m in self.synth.modalities]


def _make(cls, payload, context: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{context} must be a JSON object")
    known = set(cls.__dataclass_fields__)
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()}
    return cls(**coerced)


def load_config(
    path,
    seed_override: int | None = None,
    out_override: str | None = None,
    threads_override: int | None = None,
) -> ExperimentConfig:
    """Parse a JSON config document, rejecting unknown keys.

    CLI flags override the corresponding config values when given.
    """
    top = json.loads(Path(path).read_text())
    if not isinstance(top, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(top) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in config: {sorted(unknown)}")

    synth_raw = dict(top.get("synth", {}))
    modalities = tuple(
        _make(SynthModalityCfg, m, "synth.modalities[]") for m in synth_raw.pop("modalities", [])
    )
    ood = _make(OodCfg, synth_raw.pop("ood", {}), "synth.ood")
    synth = _make(SynthCfg, synth_raw, "synth")
    synth = replace(synth, modalities=modalities, ood=ood)

    cfg = ExperimentConfig(
        seed=int(top.get("seed", 0)),
        out_dir=top.get("out_dir"),
        threads=top.get("threads"),
        synth=synth,
        split=_make(SplitCfg, top.get("split", {}), "split"),
        heads=_make(HeadsCfg, top.get("heads", {}), "heads"),
        train=_make(TrainCfg, top.get("train", {}), "train"),
        predict=_make(PredictCfg, top.get("predict", {}), "predict"),
        fusion=_make(FusionCfg, top.get("fusion", {}), "fusion"),
        report=_make(ReportCfg, top.get("report", {}), "report"),
    )
    if seed_override is not None:
        cfg = replace(cfg, seed=seed_override)
    if out_override is not None:
        cfg = replace(cfg, out_dir=out_override)
    if threads_override is not None:
        cfg = replace(cfg, threads=threads_override)
    if not cfg.synth.modalities:
        raise ConfigError("config must declare at least one synth modality")
    for model in cfg.predict.models:
        if model not in ALL_MODELS:
            raise ConfigError(f"unknown model kind {model!r}; choose from {ALL_MODELS}")
    return cfg


class Workspace:
    """Artifact paths under one output directory."""

    def __init__(self, out_dir):
        if out_dir is None:
            raise ConfigError("an output directory is required (--out or config out_dir)")
        self.root = Path(out_dir)

    def dataset_dir(self, split_name: str) -> Path:
        if split_name == "ood":
            return self.root / "data" / "ood"
        return self.root / "data" / "in_dist" / split_name

    def checkpoint(self, modality: str, kind: str) -> Path:
        return self.root / "models" / f"{modality}_{kind}.ckpt"

    def history(self, modality: str, kind: str) -> Path:
        return self.root / "models" / f"history_{modality}_{kind}.csv"

    def prediction(self, model: str, modality: str, split_name: str) -> tuple[Path, Path]:
        base = self.root / "predictions" / model / f"{modality}_{split_name}"
        return base.with_suffix(".csv"), base.with_suffix(".bin")

    def avu_curve(self, model: str, modality: str) -> Path:
        return self.root / "avu" / model / f"curve_{modality}.csv"

    def policy(self, model: str) -> Path:
        return self.root / "avu" / model / "policy.json"

    def fusion_report(self, model: str) -> Path:
        return self.root / "fusion" / model / "report_test.csv"

    def fusion_means(self, model: str) -> Path:
        return self.root / "fusion" / model / "fused_means_test.bin"

    def fusion_metrics(self, model: str) -> Path:
        return self.root / "fusion" / model / "metrics.csv"

    def ood_dir(self, model: str) -> Path:
        return self.root / "ood" / model

    def eval_dir(self) -> Path:
        return self.root / "eval"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise PrerequisiteError(
                f"missing artifact {path}; run `bayesfuse {producer}` with this config first"
            )
        return path


def _prediction_models(cfg: ExperimentConfig) -> list[str]:
    return [m for m in ALL_MODELS if m in cfg.predict.models]


def _bayesian_models(cfg: ExperimentConfig) -> list[str]:
    return [m for m in BAYESIAN_MODELS if m in cfg.predict.models]


# ---------------------------------------------------------------------------
# Stages


def run_gen_synth(cfg: ExperimentConfig, ws: Workspace) -> None:
    """Generate the in-distribution dataset (split three ways) and the
    held-out unseen-class dataset used for OOD evaluation."""
    mods = tuple(
        SynthModality(m.name, m.dim, m.separation, m.noise, m.ambiguous_frac)
        for m in cfg.synth.modalities
    )
    spec = SynthSpec(
        num_classes=cfg.synth.num_classes,
        samples_per_class=cfg.synth.samples_per_class,
        modalities=mods,
        seed=cfg.seed,
    )
    ds = generate_synthetic(spec)
    split_spec = SplitSpec(
        train_frac=cfg.split.train_frac,
        val_frac=cfg.split.val_frac,
        test_frac=cfg.split.test_frac,
        seed=cfg.seed,
        stratified=cfg.split.stratified,
    )
    train_ds, val_ds, test_ds = split(ds, split_spec)
    for name, part in zip(SPLIT_NAMES, (train_ds, val_ds, test_ds)):
        save_dataset(part, ws.dataset_dir(name))

    # unseen classes: same generator shape, different seed, no ambiguity
    ood_mods = tuple(
        SynthModality(m.name, m.dim, m.separation, m.noise, 0.0) for m in cfg.synth.modalities
    )
    ood_spec = SynthSpec(
        num_classes=cfg.synth.ood.num_classes,
        samples_per_class=cfg.synth.ood.samples_per_class,
        modalities=ood_mods,
        seed=cfg.seed + cfg.synth.ood.seed_offset,
    )
    save_dataset(generate_synthetic(ood_spec), ws.dataset_dir("ood"))


def _load_split(ws: Workspace, name: str, producer: str = "gen-synth") -> MultimodalDataset:
    ws.require(ws.dataset_dir(name) / "manifest.json", producer)
    return load_dataset(ws.dataset_dir(name))


def run_train(cfg: ExperimentConfig, ws: Workspace) -> None:
    """Train variational and deterministic heads for every modality."""
    train_ds = _load_split(ws, "train")
    val_ds = _load_split(ws, "val")
    k = train_ds.num_classes
    h1, h2 = cfg.heads.hidden_dims
    for mi, mod in enumerate(train_ds.modalities):
        dims = [mod.dim, h1, h2, k]
        for ki, kind in enumerate(TRAINED_KINDS):
            init_seed = derive_seed(cfg.seed, _STAGE_INIT, mi, ki)
            if kind == "variational":
                head = init_variational_head(
                    dims, init_seed, prior_sigma=cfg.heads.prior_sigma, prior_mean=cfg.heads.prior_mean
                )
            else:
                head = init_deterministic_head(dims, init_seed, dropout_p=cfg.heads.dropout_p)
            tc = TrainConfig(
                learning_rate=cfg.train.learning_rate,
                momentum=cfg.train.momentum,
                batch_size=cfg.train.batch_size,
                max_epochs=cfg.train.max_epochs,
                plateau_patience=cfg.train.plateau_patience,
                plateau_factor=cfg.train.plateau_factor,
                kl_scale=cfg.train.kl_scale,
                mc_train_samples=cfg.train.mc_train_samples,
                seed=derive_seed(cfg.seed, _STAGE_TRAIN, mi, ki),
            )
            head, history = train(head, train_ds, val_ds, tc, modality=mod.name)
            history.to_csv(ws.history(mod.name, kind))
            save_checkpoint(
                head,
                ws.checkpoint(mod.name, kind),
                metadata={
                    "epoch": getattr(head, "_best_epoch", 0),
                    "best_val_loss": getattr(head, "_best_val_loss", None),
                    "modality": mod.name,
                },
            )


def run_predict(cfg: ExperimentConfig, ws: Workspace) -> None:
    """Write prediction dumps for every configured model, modality, split."""
    datasets = {name: _load_split(ws, name) for name in cfg.predict.splits}
    modalities = datasets[next(iter(datasets))].modalities
    t = cfg.predict.mc_passes
    for model_ix, model in enumerate(_prediction_models(cfg)):
        kind = "variational" if model == "variational" else "deterministic"
        for mi, mod in enumerate(modalities):
            ckpt = ws.require(ws.checkpoint(mod.name, kind), "train")
            head, _ = load_checkpoint(ckpt, expect_kind=kind)
            for si, split_name in enumerate(cfg.predict.splits):
                ds = datasets[split_name]
                x = ds.features[mod.name]
                stream = RngStream(derive_seed(cfg.seed, _STAGE_PREDICT, model_ix, mi, si))
                if model == "variational":
                    preds = mc_predict(head, x, t, stream)
                elif model == "mc_dropout":
                    preds = mc_dropout_predict(head, x, t, stream)
                else:
                    preds = single_pass_predict(head, x)
                csv_path, bin_path = ws.prediction(model, mod.name, split_name)
                csv_path.parent.mkdir(parents=True, exist_ok=True)
                write_prediction_dump(csv_path, bin_path, ds.sample_ids, ds.labels, preds)


def _load_pred(ws: Workspace, model: str, modality: str, split_name: str) -> PredictionSet:
    csv_path, bin_path = ws.prediction(model, modality, split_name)
    ws.require(csv_path, "predict")
    ws.require(bin_path, "predict")
    return load_prediction_dump(csv_path, bin_path)


def run_avu(cfg: ExperimentConfig, ws: Workspace) -> None:
    """Fit per-modality uncertainty thresholds on validation predictions."""
    names = cfg.modality_names()
    for model in _bayesian_models(cfg):
        means_by_mod, u_by_mod, labels = {}, {}, None
        for name in names:
            dump = _load_pred(ws, model, name, "val")
            means_by_mod[name] = dump.means
            u_by_mod[name] = dump.uncertainties(cfg.fusion.metric)
            labels = dump.labels
        policy, searches = fit_fusion_policy(
            means_by_mod, u_by_mod, labels, metric=cfg.fusion.metric, mode=cfg.fusion.mode
        )
        for name, search in searches.items():
            path = ws.avu_curve(model, name)
            path.parent.mkdir(parents=True, exist_ok=True)
            search.curve_to_csv(path)
        policy.save(ws.policy(model))


def _fusion_metric_rows(means: np.ndarray, labels: np.ndarray, k: int) -> list:
    top5 = min(5, k)
    return [
        topk_accuracy(means, labels, 1),
        topk_accuracy(means, labels, top5),
        micro_pr_curve(means, labels).auc,
        micro_roc_curve(means, labels).auc,
    ]


def run_fuse(cfg: ExperimentConfig, ws: Workspace) -> None:
    """Fuse test predictions per model and report gated vs naive pooling."""
    names = cfg.modality_names()
    if len(names) < 2:
        raise ConfigError("fusion requires at least two modalities")
    for model in _prediction_models(cfg):
        dumps = {name: _load_pred(ws, model, name, "test") for name in names}
        labels = dumps[names[0]].labels
        ids = dumps[names[0]].sample_ids
        k = dumps[names[0]].samples.shape[2]
        means = {name: dumps[name].means for name in names}
        naive = np.mean([means[name] for name in names], axis=0)

        if model in BAYESIAN_MODELS:
            policy = FusionPolicy.load(ws.require(ws.policy(model), "avu"))
            u = {name: dumps[name].uncertainties(cfg.fusion.metric) for name in names}
            fused = np.empty_like(naive)
            tags = []
            for i in range(len(ids)):
                vec, tag = fuse(
                    [means[name][i] for name in names],
                    [u[name][i] for name in names],
                    policy,
                )
                fused[i] = vec
                tags.append(tag)
            strategies = [("gated", fused), ("naive_average", naive)]
        else:
            u = {name: np.zeros(len(ids)) for name in names}
            fused = naive
            tags = ["averaged"] * len(ids)
            strategies = [("average_pooling", naive)]

        report_path = ws.fusion_report(model)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        write_csv(
            report_path,
            ["sample_id", "tag"] + [f"u_{name}" for name in names] + ["fused_top1", "label"],
            [
                [ids[i], tags[i]]
                + [float(u[name][i]) for name in names]
                + [int(fused[i].argmax()), int(labels[i])]
                for i in range(len(ids))
            ],
        )
        _write_tensor_block(ws.fusion_means(model), fused)
        write_csv(
            ws.fusion_metrics(model),
            ["strategy", "top1", "top5", "pr_auc", "roc_auc"],
            [[name] + _fusion_metric_rows(m, labels, k) for name, m in strategies],
        )


def run_ood(cfg: ExperimentConfig, ws: Workspace) -> None:
    """Histogram uncertainties for in-dist vs held-out classes and report
    the separation statistics per model."""
    names = cfg.modality_names()
    bins = cfg.report.histogram_bins
    for model in _prediction_models(cfg):
        rows = []
        out_dir = ws.ood_dir(model)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in names:
            test_dump = _load_pred(ws, model, name, "test")
            ood_dump = _load_pred(ws, model, name, "ood")
            k = test_dump.samples.shape[2]
            if model in BAYESIAN_MODELS:
                metrics_here = ("bald", "entropy")
            else:
                metrics_here = ("one_minus_confidence",)
            for metric in metrics_here:
                if metric == "one_minus_confidence":
                    u_in = 1.0 - test_dump.means.max(axis=1)
                    u_out = 1.0 - ood_dump.means.max(axis=1)
                    rng = (0.0, 1.0)
                else:
                    u_in = test_dump.uncertainties(metric)
                    u_out = ood_dump.uncertainties(metric)
                    rng = (0.0, float(np.log(k)))
                sep = ood_separation(u_in, u_out)
                rows.append(
                    [name, metric, sep.mean_in, sep.median_in, sep.mean_out, sep.median_out, sep.auroc]
                )
                density_histogram(u_in, bins, *rng).to_csv(out_dir / f"hist_{name}_{metric}_in.csv")
                density_histogram(u_out, bins, *rng).to_csv(out_dir / f"hist_{name}_{metric}_ood.csv")
        write_csv(
            out_dir / "separation.csv",
            ["modality", "metric", "mean_in", "median_in", "mean_ood", "median_ood", "auroc"],
            rows,
        )


def run_eval(cfg: ExperimentConfig, ws: Workspace) -> None:
    """Assemble the accuracy/AUC comparison tables and confidence gaps."""
    names = cfg.modality_names()
    eval_dir = ws.eval_dir()
    curves_dir = eval_dir / "curves"
    curves_dir.mkdir(parents=True, exist_ok=True)

    summary_rows = []
    gap_rows = []
    for model in _prediction_models(cfg):
        pooled_conf, pooled_correct = [], []
        for name in names:
            dump = _load_pred(ws, model, name, "test")
            means, labels = dump.means, dump.labels
            k = means.shape[1]
            summary_rows.append([model, name] + _fusion_metric_rows(means, labels, k))
            micro_pr_curve(means, labels).to_csv(curves_dir / f"{model}_{name}_pr.csv")
            micro_roc_curve(means, labels).to_csv(curves_dir / f"{model}_{name}_roc.csv")

            conf = means.max(axis=1)
            correct = means.argmax(axis=1) == labels
            gap_rows.append(_gap_row(model, name, conf, correct))
            pooled_conf.append(conf)
            pooled_correct.append(correct)

        fused_path = ws.require(ws.fusion_means(model), "fuse")
        fused = _read_tensor_block(fused_path)
        labels = _load_pred(ws, model, names[0], "test").labels
        summary_rows.append([model, "audiovisual"] + _fusion_metric_rows(fused, labels, fused.shape[1]))
        micro_pr_curve(fused, labels).to_csv(curves_dir / f"{model}_audiovisual_pr.csv")
        micro_roc_curve(fused, labels).to_csv(curves_dir / f"{model}_audiovisual_roc.csv")
        fused_conf = fused.max(axis=1)
        fused_correct = fused.argmax(axis=1) == labels
        gap_rows.append(_gap_row(model, "audiovisual", fused_conf, fused_correct))
        gap_rows.append(
            _gap_row(
                model,
                "single_pooled",
                np.concatenate(pooled_conf),
                np.concatenate(pooled_correct),
            )
        )

    write_csv(
        eval_dir / "summary.csv",
        ["model", "modality", "top1", "top5", "pr_auc", "roc_auc"],
        summary_rows,
    )
    write_csv(
        eval_dir / "confidence_gaps.csv",
        ["model", "modality", "mean_conf_true", "mean_conf_false", "gap", "n_true", "n_false"],
        gap_rows,
    )


def _gap_row(model: str, scope: str, conf: np.ndarray, correct: np.ndarray) -> list:
    n_true = int(correct.sum())
    n_false = int(len(correct) - n_true)
    mean_true = float(conf[correct].mean()) if n_true else float("nan")
    mean_false = float(conf[~correct].mean()) if n_false else float("nan")
    gap = mean_true - mean_false if n_true and n_false else float("nan")
    return [model, scope, mean_true, mean_false, gap, n_true, n_false]


STAGES = {
    "gen-synth": run_gen_synth,
    "train": run_train,
    "predict": run_predict,
    "avu": run_avu,
    "fuse": run_fuse,
    "ood": run_ood,
    "eval": run_eval,
}


def run_all(cfg: ExperimentConfig, ws: Workspace) -> None:
    for stage in ("gen-synth", "train", "predict", "avu", "fuse", "ood", "eval"):
        STAGES[stage](cfg, ws)
