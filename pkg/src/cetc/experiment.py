"""Experiment harness: config parsing, single runs, and the coefficient sweep.

A run is described by one JSON document with ``dataset`` / ``model`` /
``train`` sections plus either a single ``coefficients`` triple or
``"sweep": true``.  Every run writes its fully-resolved config next to the
results so the exact run can be reproduced by pointing the CLI back at it.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Dataset, DatasetSpec, ImageFolderSource, SplitIndices,
                   SplitSpec, SyntheticSource, split_dataset)
from .decoder import EnsembleCoefficients
from .encoder import SubEncoderConfig
from .metrics import (MetricReport, Predictions, compute_metrics,
                      confusion_matrix, render_table, reports_to_csv)
from .model import CETC, ModelConfig
from .training import TrainConfig, evaluate, train
from .transformer import TCBConfig

__all__ = ["ExperimentConfig", "ExperimentError", "SweepResult",
           "coefficient_groups", "run_single", "run_sweep", "run_eval_only"]


class ExperimentError(RuntimeError):
    """A run failed; partial artifacts were preserved in the output dir."""


def coefficient_groups() -> list[EnsembleCoefficients]:
    """The seven (alpha, beta, gamma) groups of the coefficient sweep."""
    third = 1.0 / 3.0
    return [
        EnsembleCoefficients(0.8, 0.1, 0.1),
        EnsembleCoefficients(0.6, 0.2, 0.2),
        EnsembleCoefficients(0.1, 0.8, 0.1),
        EnsembleCoefficients(0.2, 0.6, 0.2),
        EnsembleCoefficients(0.1, 0.1, 0.8),
        EnsembleCoefficients(0.2, 0.2, 0.6),
        EnsembleCoefficients(third, third, third),
    ]


# ---------------------------------------------------------------------------
# Config (de)serialization
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    model: ModelConfig
    train: TrainConfig
    coefficients: Optional[EnsembleCoefficients] = None
    sweep: bool = False
    output_dir: str = "runs/out"
    seed: int = 0
    deterministic: bool = False
    init_checkpoint: Optional[str] = None  # warm-start weights before training

    def __post_init__(self):
        if self.sweep and self.coefficients is not None:
            raise ValueError("config must select exactly one of single "
                             "coefficients or sweep mode, got both")
        if not self.sweep and self.coefficients is None:
            self.coefficients = EnsembleCoefficients.uniform()

    # -- JSON ---------------------------------------------------------------

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        ds = doc.get("dataset", {})
        src = ds.get("source", {"kind": "synthetic"})
        kind = src.get("kind", "synthetic")
        if kind == "synthetic":
            source = SyntheticSource(
                seed=src.get("seed", 0),
                n_per_class=src.get("n_per_class", 32),
                image_size=src.get("image_size", 32),
            )
        elif kind == "image_folder":
            source = ImageFolderSource(path=src["path"],
                                       on_bad_image=src.get("on_bad_image", "error"))
        else:
            raise ValueError(f"unknown dataset source kind {kind!r}")
        split = ds.get("split", {})
        dataset = DatasetSpec(
            source=source,
            split=SplitSpec(kind=split.get("kind", "ratio_8_1_1"),
                            test_path=split.get("test_path")),
            seed=ds.get("seed", 0),
        )

        mdl = doc.get("model", {})
        preset = mdl.get("preset", "desk")
        base = {"default": ModelConfig.default, "desk": ModelConfig.desk,
                "tiny": ModelConfig.tiny}
        if preset not in base:
            raise ValueError(f"unknown model preset {preset!r}")
        model = base[preset]()
        if "dtype" in mdl:
            model = dataclasses.replace(model, dtype=mdl["dtype"])
        if "decoder_channels" in mdl:
            model = dataclasses.replace(model, decoder_channels=mdl["decoder_channels"])
        if "encoders" in mdl:
            encoders = [SubEncoderConfig(id=e["id"], out_channels=e["out_channels"],
                                         stage_widths=list(e["stage_widths"]),
                                         in_channels=e.get("in_channels", 3))
                        for e in mdl["encoders"]]
            model = dataclasses.replace(model, encoders=encoders)
        if "tcb" in mdl:
            t = dict(patch_size=model.tcb.patch_size, embed_dim=model.tcb.embed_dim,
                     depths=tuple(model.tcb.depths), heads=tuple(model.tcb.heads),
                     window_size=model.tcb.window_size, mlp_ratio=model.tcb.mlp_ratio,
                     num_classes=model.tcb.num_classes)
            for key, val in mdl["tcb"].items():
                if key in ("depths", "heads"):
                    val = tuple(val)
                t[key] = val
            model = dataclasses.replace(model, tcb=TCBConfig(**t))

        tr = doc.get("train", {})
        train_cfg = TrainConfig(
            lr0=tr.get("lr0", 0.003),
            epochs=tr.get("epochs", 20),
            batch=tr.get("batch", 64),
            plateau_factor=tr.get("plateau_factor", 0.5),
            plateau_patience=tr.get("plateau_patience", 5),
            hflip_prob=tr.get("hflip_prob", 0.5),
            resize_crop=tr.get("resize_crop", 224),
            normalize_mean=tuple(tr.get("normalize_mean", (0.485, 0.456, 0.406))),
            normalize_std=tuple(tr.get("normalize_std", (0.229, 0.224, 0.225))),
            seed=tr.get("seed", doc.get("seed", 0)),
        )

        coeffs = None
        if doc.get("coefficients") is not None:
            raw = doc["coefficients"]
            if isinstance(raw, str):
                coeffs = EnsembleCoefficients.parse(raw)
            else:
                vals = [EnsembleCoefficients.parse_value(v) if isinstance(v, str)
                        else float(v) for v in raw]
                coeffs = EnsembleCoefficients(*vals)
        return ExperimentConfig(
            dataset=dataset,
            model=model,
            train=train_cfg,
            coefficients=coeffs,
            sweep=bool(doc.get("sweep", False)),
            output_dir=doc.get("output_dir", "runs/out"),
            seed=doc.get("seed", 0),
            deterministic=bool(doc.get("deterministic", False)),
            init_checkpoint=doc.get("init_checkpoint"),
        )

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        src = self.dataset.source
        if isinstance(src, SyntheticSource):
            source = {"kind": "synthetic", "seed": src.seed,
                      "n_per_class": src.n_per_class, "image_size": src.image_size}
        else:
            source = {"kind": "image_folder", "path": src.path,
                      "on_bad_image": src.on_bad_image}
        doc = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "deterministic": self.deterministic,
            "sweep": self.sweep,
            "init_checkpoint": self.init_checkpoint,
            "coefficients": None if self.coefficients is None
            else list(self.coefficients.as_tuple()),
            "dataset": {
                "source": source,
                "split": {"kind": self.dataset.split.kind,
                          "test_path": self.dataset.split.test_path},
                "seed": self.dataset.seed,
            },
            "model": {
                "preset": "default",  # fully spelled out below; preset is cosmetic
                "dtype": self.model.dtype,
                "decoder_channels": self.model.decoder_channels,
                "encoders": [
                    {"id": e.id, "out_channels": e.out_channels,
                     "stage_widths": list(e.stage_widths),
                     "in_channels": e.in_channels}
                    for e in self.model.encoders
                ],
                "tcb": {
                    "patch_size": self.model.tcb.patch_size,
                    "embed_dim": self.model.tcb.embed_dim,
                    "depths": list(self.model.tcb.depths),
                    "heads": list(self.model.tcb.heads),
                    "window_size": self.model.tcb.window_size,
                    "mlp_ratio": self.model.tcb.mlp_ratio,
                    "num_classes": self.model.tcb.num_classes,
                },
            },
            "train": {
                "lr0": self.train.lr0,
                "epochs": self.train.epochs,
                "batch": self.train.batch,
                "plateau_factor": self.train.plateau_factor,
                "plateau_patience": self.train.plateau_patience,
                "hflip_prob": self.train.hflip_prob,
                "resize_crop": self.train.resize_crop,
                "normalize_mean": list(self.train.normalize_mean),
                "normalize_std": list(self.train.normalize_std),
                "seed": self.train.seed,
            },
        }
        return doc

    def write_resolved(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

@dataclass
class SingleRunResult:
    coefficients: EnsembleCoefficients
    val_loss: float
    val_report: MetricReport
    test_report: Optional[MetricReport]
    checkpoint: Path
    report_path: Path


@dataclass
class SweepResult:
    rows: list[tuple[EnsembleCoefficients, MetricReport]]
    best_index: int

    @property
    def best(self) -> tuple[EnsembleCoefficients, MetricReport]:
        return self.rows[self.best_index]


def _limit_threads(cfg: ExperimentConfig):
    if not cfg.deterministic:
        return None
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:  # determinism still holds within one process
        return None


def _prepare_data(cfg: ExperimentConfig) -> tuple[Dataset, SplitIndices,
                                                  Optional[Dataset]]:
    dataset = Dataset.load(cfg.dataset)
    splits = split_dataset(dataset.labels, cfg.dataset)
    external_test = None
    if cfg.dataset.split.kind == "ratio_8_2" and cfg.dataset.split.test_path:
        external_test = Dataset.from_folder(
            ImageFolderSource(path=cfg.dataset.split.test_path))
    return dataset, splits, external_test


def _metric_report(logits: np.ndarray, labels: np.ndarray) -> MetricReport:
    return compute_metrics(confusion_matrix(Predictions(labels, logits)))


def _run_one(cfg: ExperimentConfig, coeffs: EnsembleCoefficients, out_dir: Path,
             dataset: Dataset, splits: SplitIndices,
             external_test: Optional[Dataset]) -> SingleRunResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    model = CETC(cfg.model, seed=cfg.seed)
    if cfg.init_checkpoint:
        model.load_state_dict(load_checkpoint(cfg.init_checkpoint))
    result = train(model, dataset, splits.train, splits.val, coeffs, cfg.train,
                   log_path=out_dir / "epoch_log.csv")
    # Persist the best weights first, then measure everything from the
    # reloaded archive so stored metrics match later eval-only runs exactly.
    ckpt = out_dir / "best.ckpt"
    save_checkpoint(ckpt, result.best_state)
    model.load_state_dict(load_checkpoint(ckpt))

    val_loss, val_acc, val_logits = evaluate(model, dataset, splits.val, coeffs,
                                             cfg.train)
    val_report = _metric_report(val_logits, dataset.labels[splits.val])

    test_report = None
    test_loss = None
    if external_test is not None:
        t_loss, _, t_logits = evaluate(model, external_test,
                                       np.arange(len(external_test)), coeffs,
                                       cfg.train)
        test_report = _metric_report(t_logits, external_test.labels)
        test_loss = t_loss
    elif len(splits.test):
        t_loss, _, t_logits = evaluate(model, dataset, splits.test, coeffs,
                                       cfg.train)
        test_report = _metric_report(t_logits, dataset.labels[splits.test])
        test_loss = t_loss

    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps({
        "coefficients": list(coeffs.as_tuple()),
        "val_loss": val_loss,
        "val_acc": val_acc,
        "val_metrics": val_report.as_dict(),
        "test_loss": test_loss,
        "test_metrics": None if test_report is None else test_report.as_dict(),
        "epochs_run": len(result.epoch_log),
    }, indent=2, sort_keys=True) + "\n")
    return SingleRunResult(coeffs, val_loss, val_report, test_report, ckpt,
                           report_path)


def _primary_report(r: SingleRunResult) -> MetricReport:
    return r.test_report if r.test_report is not None else r.val_report


def run_single(cfg: ExperimentConfig) -> SingleRunResult:
    if cfg.sweep:
        raise ValueError("run_single called with a sweep-mode config")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out / "resolved_config.json")
    limiter = _limit_threads(cfg)
    try:
        dataset, splits, external_test = _prepare_data(cfg)
        result = _run_one(cfg, cfg.coefficients, out, dataset, splits, external_test)
    finally:
        if limiter is not None:
            limiter.unregister()
    label = _coeff_label(cfg.coefficients)
    rows = [(label, _primary_report(result))]
    (out / "results.txt").write_text(render_table(rows))
    (out / "results.csv").write_text(reports_to_csv(rows))
    return result


def _coeff_label(c: EnsembleCoefficients) -> str:
    return f"a={c.alpha:.4f} b={c.beta:.4f} g={c.gamma:.4f}"


def _select_best(reports: list[MetricReport]) -> int:
    """Highest ACC; ties broken by FOS, then by list order."""
    def key(r: MetricReport):
        return (r.acc if r.acc is not None else -1.0,
                r.fos if r.fos is not None else -1.0)
    best = 0
    for i in range(1, len(reports)):
        if key(reports[i]) > key(reports[best]):
            best = i
    return best


def run_sweep(cfg: ExperimentConfig) -> SweepResult:
    if not cfg.sweep:
        raise ValueError("run_sweep called with a single-mode config")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out / "resolved_config.json")
    groups = coefficient_groups()
    limiter = _limit_threads(cfg)
    rows: list[tuple[str, MetricReport]] = []
    results: list[SingleRunResult] = []
    status: list[str] = []
    try:
        dataset, splits, external_test = _prepare_data(cfg)
        for i, coeffs in enumerate(groups):
            sub = out / f"group{i}_a{coeffs.alpha:.4f}_b{coeffs.beta:.4f}_g{coeffs.gamma:.4f}"
            try:
                r = _run_one(cfg, coeffs, sub, dataset, splits, external_test)
            except Exception as exc:
                # Persist what finished before aborting, with the failure marked.
                rows.append((_coeff_label(coeffs),
                             MetricReport(*(None,) * 6)))
                status.append(f"error: {exc}")
                _write_sweep_tables(out, rows, status)
                raise ExperimentError(
                    f"sweep group {i} ({_coeff_label(coeffs)}) failed: {exc}"
                ) from exc
            results.append(r)
            rows.append((_coeff_label(coeffs), _primary_report(r)))
            status.append("ok")
    finally:
        if limiter is not None:
            limiter.unregister()

    _write_sweep_tables(out, rows, status)
    reports = [rep for _, rep in rows]
    best = _select_best(reports)
    (out / "sweep_result.json").write_text(json.dumps({
        "best_index": best,
        "best_coefficients": list(groups[best].as_tuple()),
        "rows": [
            {"coefficients": list(g.as_tuple()), "metrics": rep.as_dict()}
            for g, rep in zip(groups, reports)
        ],
    }, indent=2, sort_keys=True) + "\n")
    return SweepResult(rows=list(zip(groups, reports)), best_index=best)


def _write_sweep_tables(out: Path, rows, status) -> None:
    (out / "results.txt").write_text(render_table(rows, bold_best=True))
    (out / "results.csv").write_text(reports_to_csv(rows, extra={"status": status}))


def run_eval_only(cfg: ExperimentConfig, ckpt_path) -> dict:
    """Evaluate a saved checkpoint; no training, no augmentation."""
    limiter = _limit_threads(cfg)
    try:
        dataset, splits, external_test = _prepare_data(cfg)
        coeffs = cfg.coefficients or EnsembleCoefficients.uniform()
        model = CETC(cfg.model, seed=cfg.seed)
        model.load_state_dict(load_checkpoint(ckpt_path))
        val_loss, val_acc, val_logits = evaluate(model, dataset, splits.val,
                                                 coeffs, cfg.train)
        val_report = _metric_report(val_logits, dataset.labels[splits.val])
        doc = {
            "checkpoint": str(ckpt_path),
            "val_loss": val_loss,
            "val_acc": val_acc,
            "val_metrics": val_report.as_dict(),
        }
        stored = Path(ckpt_path).parent / "report.json"
        if stored.exists():
            prior = json.loads(stored.read_text())
            doc["stored_val_loss"] = prior["val_loss"]
            doc["matches_stored"] = bool(
                abs(prior["val_loss"] - val_loss) <= 1e-12
            )
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return doc
    finally:
        if limiter is not None:
            limiter.unregister()
