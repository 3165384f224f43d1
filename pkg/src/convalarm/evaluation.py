"""ROC-AUC metric, repeated-run experiment driver, and report emission.

AUC uses the rank-statistic formulation: the probability that a uniformly
random anomalous sample outscores a uniformly random typical one, ties
counted one half.  Midranks over a single sort make it O(N log N) and
exactly equal to the pairwise count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, normalize
from .networks import (
    AlarmConfig,
    ImageInput,
    ModelBundle,
    TabularInput,
    TargetConfig,
    build_model,
    score,
)
from .tensor import Tensor
from .training import (
    TrainConfig,
    fit,
    make_one_vs_all,
    stratified_split,
    stratified_subset,
)

__all__ = [
    "ScoreSet",
    "ModeResult",
    "EvalReport",
    "ExperimentSpec",
    "roc_auc",
    "baseline_recon_score",
    "score_batched",
    "run_experiment",
    "render_report",
    "render_reports",
    "parse_report_csv",
]


@dataclass
class ScoreSet:
    """Anomaly scores with their ground-truth 0/1 labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError(f"scores {self.scores.shape} and labels "
                             f"{self.labels.shape} must be equal-length vectors")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


def roc_auc(s: ScoreSet) -> float:
    """Area under the ROC curve via midranks; exact under ties.

    Raises on single-class input rather than returning a default.
    """
    labels = s.labels
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"roc_auc needs both classes; got {n_pos} anomalies "
                         f"and {n_neg} typical samples")
    order = np.argsort(s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    # midrank of each tie group: (first + last)/2 + 1, 1-based
    boundaries = np.flatnonzero(np.diff(sorted_scores))
    starts = np.concatenate([[0], boundaries + 1])
    ends = np.concatenate([boundaries, [len(sorted_scores) - 1]])
    mid = (starts + ends) / 2.0 + 1.0
    ranks = np.empty(len(sorted_scores))
    ranks[order] = np.repeat(mid, ends - starts + 1)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def score_batched(bundle: ModelBundle, feats: np.ndarray, mode: str,
                   lam: float = 1.0, batch: int = 256) -> np.ndarray:
    # combined mode min-max normalizes over the full scored set, not per chunk
    if mode == "combined":
        alarm = score_batched(bundle, feats, "alarm", batch=batch)
        rec = score_batched(bundle, feats, "recon", batch=batch)
        if lam < 0:
            raise ValueError(f"combined score weight must be >= 0, got {lam}")
        span = rec.max() - rec.min()
        norm = (rec - rec.min()) / span if span > 0 else np.zeros_like(rec)
        return alarm + np.float32(lam) * norm
    out = [score(bundle, Tensor(feats[lo:lo + batch]), mode).data
           for lo in range(0, len(feats), batch)]
    return np.concatenate(out)


def baseline_recon_score(bundle: ModelBundle, dataset: Dataset,
                         indices=None) -> ScoreSet:
    """Classic autoencoder baseline: reconstruction error as the anomaly score."""
    if dataset.labels is None:
        raise ValueError(f"{dataset.name}: scoring needs labels")
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    scores = score_batched(bundle, dataset.features[idx], "recon")
    return ScoreSet(scores=scores, labels=dataset.labels[idx])


# ---------------------------------------------------------------------------
# repeated-run experiments


@dataclass
class ModeResult:
    mode: str
    aucs: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def std(self) -> float:
        # population formula over runs
        return float(np.std(self.aucs))


@dataclass
class EvalReport:
    dataset: str
    normal_class: int | None
    gamma: float
    iterations: int
    base_seed: int
    combined_lambda: float
    modes: list[ModeResult]
    target_cfg: dict
    alarm_cfg: dict
    train_cfg: dict


@dataclass
class ExperimentSpec:
    """Everything one repeated experiment needs.

    ``target_cfg.input_kind`` is re-derived from the post-pipeline feature
    shape each iteration (normalization may drop constant columns), so the
    configured dimensions serve only as a template.
    """

    dataset: Dataset
    target_cfg: TargetConfig
    alarm_cfg: AlarmConfig
    train_cfg: TrainConfig
    iterations: int = 10
    normal_class: int | None = None
    normalize_method: str | None = None
    modes: tuple[str, ...] = ("alarm", "recon", "combined")
    combined_lambda: float = 1.0
    ratios: tuple = (8, 1, 1)
    subset_size: int | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def _resolve_input_kind(cfg: TargetConfig, feats: np.ndarray) -> TargetConfig:
    if feats.ndim == 4:
        kind = ImageInput(feats.shape[1], feats.shape[2], feats.shape[3])
    else:
        kind = TabularInput(feats.shape[1])
    return replace(cfg, input_kind=kind)


def _run_iteration(spec: ExperimentSpec, i: int) -> dict[str, float]:
    seed_i = spec.train_cfg.seed + i
    ds = spec.dataset
    if spec.normal_class is not None:
        ds = make_one_vs_all(ds, spec.normal_class)
    if spec.subset_size is not None:
        ds = stratified_subset(ds, spec.subset_size, seed_i)
    split = stratified_split(ds, spec.ratios, seed_i)
    if spec.normalize_method:
        normalized, _ = normalize(ds, spec.normalize_method, split.train_idx)
        split = replace(split, dataset=normalized)
    feats = split.dataset.features
    bundle = build_model(_resolve_input_kind(spec.target_cfg, feats),
                         spec.alarm_cfg, seed_i)
    fit(bundle, split, replace(spec.train_cfg, seed=seed_i))
    test_x = feats[split.test_idx]
    test_y = split.dataset.labels[split.test_idx]
    out = {}
    for mode in spec.modes:
        scores = score_batched(bundle, test_x, mode, lam=spec.combined_lambda)
        out[mode] = roc_auc(ScoreSet(scores=scores, labels=test_y))
    return out


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> EvalReport:
    """Repeat split / fit / score ``iterations`` times and aggregate AUCs.

    Iteration i derives its seed as ``base_seed + i`` and re-randomizes the
    stratified split.  Any iteration failure aborts the experiment with the
    iteration index.
    """

    def guarded(i: int) -> dict[str, float]:
        try:
            return _run_iteration(spec, i)
        except Exception as e:
            raise RuntimeError(f"experiment iteration {i} failed: {e}") from e

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(guarded, range(spec.iterations)))
    else:
        results = [guarded(i) for i in range(spec.iterations)]

    modes = [ModeResult(mode=m, aucs=[r[m] for r in results])
             for m in spec.modes]
    return EvalReport(
        dataset=spec.dataset.name, normal_class=spec.normal_class,
        gamma=spec.train_cfg.gamma, iterations=spec.iterations,
        base_seed=spec.train_cfg.seed, combined_lambda=spec.combined_lambda,
        modes=modes, target_cfg=spec.target_cfg.to_dict(),
        alarm_cfg=spec.alarm_cfg.to_dict(), train_cfg=spec.train_cfg.to_dict())


# ---------------------------------------------------------------------------
# rendering


CSV_HEADER = "dataset,normal_class,gamma,mode,iterations,mean_auc,std_auc,run_aucs"


def render_reports(reports: list[EvalReport], fmt: str) -> str:
    """Deterministic text for a list of reports: ``csv`` or ``markdown``."""
    if fmt == "csv":
        lines = [CSV_HEADER]
        for r in reports:
            nc = "" if r.normal_class is None else str(r.normal_class)
            for m in r.modes:
                runs = ";".join(repr(float(a)) for a in m.aucs)
                lines.append(f"{r.dataset},{nc},{float(r.gamma)!r},{m.mode},"
                             f"{r.iterations},{m.mean!r},{m.std!r},{runs}")
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        chunks = []
        for r in reports:
            nc = "all" if r.normal_class is None else str(r.normal_class)
            chunks.append(f"## {r.dataset} (normal class {nc}, gamma={r.gamma:g}, "
                          f"{r.iterations} runs)\n")
            chunks.append("| mode | AUC |")
            chunks.append("|------|-----|")
            for m in r.modes:
                chunks.append(f"| {m.mode} | {m.mean:.4f} ± {m.std:.4f} |")
            chunks.append("")
        return "\n".join(chunks).rstrip("\n") + "\n"
    raise ValueError(f"unknown report format {fmt!r}; expected csv or markdown")


def render_report(report: EvalReport, fmt: str) -> str:
    return render_reports([report], fmt)


def parse_report_csv(text: str) -> list[dict]:
    """Inverse of the CSV renderer; numeric fields round-trip exactly."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("not a report CSV: header mismatch")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        dataset, nc, gamma, mode, iters, mean, std, runs = parts
        rows.append({
            "dataset": dataset,
            "normal_class": None if nc == "" else int(nc),
            "gamma": float(gamma),
            "mode": mode,
            "iterations": int(iters),
            "mean_auc": float(mean),
            "std_auc": float(std),
            "run_aucs": [float(x) for x in runs.split(";")],
        })
    return rows
