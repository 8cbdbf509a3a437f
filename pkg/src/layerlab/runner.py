"""Grid execution: datasets x interventions x layers over one read-only model."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (
    MetricRecord,
    WtlSummary,
    cosine_similarity_matrix,
    mean_ignoring_nan,
    roc_auc,
    win_tie_lose,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, cell_rng
from .data_io import load_csv, load_schema, preprocess, standardize_episode, subsample_table
from .errors import CheckpointError, ConfigError, LayerLabError
from .model import EmbeddingStack, Model, apply_decoder, build_model, forward, train
from .prior import Episode, Table, sample_task, split_episode
from .probing import build_transfer_matrix
from .surgery import LayerPlan, repeat_grid, skip_grid, swap_grid

# execution and reporting order
SURGERY = ("skip", "swap", "repeat")
RECORD_INTERVENTIONS = ("skip", "swap", "repeat", "early-exit")

SUBCOMMAND_INTERVENTIONS = {
    "train": (),
    "surgery": SURGERY,
    "probe": ("probe",),
    "similarity": ("cosine",),
    "early-exit": ("early-exit",),
}


@dataclass
class TrainingInfo:
    source: str  # "trained" or "checkpoint"
    seconds: float = 0.0
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    checkpoint: str | None = None


@dataclass
class Dataset:
    name: str
    episode: Episode


@dataclass
class CellResult:
    """Output of one (dataset, intervention) unit."""

    dataset: str
    intervention: str
    records: list[MetricRecord] = field(default_factory=list)
    matrices: dict[str, np.ndarray] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)


@dataclass
class ExperimentReport:
    config: dict
    interventions: list[str]
    n_layers: int
    datasets: list[str]
    baselines: dict[str, float]
    records: list[MetricRecord]
    transfer: dict[str, np.ndarray]
    transfer_counts: dict[str, np.ndarray]
    probe_completed: dict[str, int]
    cosine: np.ndarray | None
    cosine_count: int
    wtl: dict[str, WtlSummary]
    failures: list[dict]
    seeds: dict
    timing: dict
    training: TrainingInfo
    expected_cells: int

    def records_for(self, intervention: str) -> list[MetricRecord]:
        prefix = {"early-exit": "exit:"}.get(intervention, intervention + ":")
        return [r for r in self.records if r.plan.startswith(prefix)]

    def per_layer_mean(self, intervention: str) -> np.ndarray:
        """Mean AUC across datasets, indexed by the intervened layer (skip/repeat/early-exit)."""
        out = np.full(self.n_layers, np.nan)
        for i in range(self.n_layers):
            vals = [r.auc for r in self.records_for(intervention) if layer_of(r.plan) == i]
            out[i] = mean_ignoring_nan(vals)
        return out

    def swap_matrix(self) -> np.ndarray:
        """Mean AUC after swapping layers i and j; the diagonal holds the mean baseline."""
        L = self.n_layers
        m = np.full((L, L), np.nan)
        base = mean_ignoring_nan(list(self.baselines.values()))
        for i in range(L):
            m[i, i] = base
        for r in self.records_for("swap"):
            i, j = map(int, r.plan.split(":")[1].split("-"))
            m[i, j] = m[j, i] = mean_ignoring_nan(
                [s.auc for s in self.records_for("swap") if s.plan == r.plan]
            )
        return m

    @property
    def mean_baseline_auc(self) -> float:
        return mean_ignoring_nan(list(self.baselines.values()))


def layer_of(plan_label: str) -> int:
    """First layer index in a plan label such as ``skip:2``, ``swap:1-3`` or ``repeat:4x2``."""
    arg = plan_label.split(":")[1]
    return int(arg.split("x")[0].split("-")[0])


# model and data


def prepare_model(cfg: ExperimentConfig, out_dir: Path | None = None, save: bool = True) -> tuple[Model, TrainingInfo]:
    ckpt = cfg.tree["model"]["checkpoint"]
    if ckpt:
        try:
            return load_checkpoint(ckpt), TrainingInfo("checkpoint", checkpoint=str(ckpt))
        except CheckpointError as exc:
            raise ConfigError(f"cannot load model checkpoint: {exc}") from exc
    model = build_model(cfg.model_config)
    tr = cfg.training
    start = time.perf_counter()
    losses = train(
        model,
        cfg.training_prior,
        int(tr["steps"]),
        int(tr["batch_tasks"]),
        float(tr["learning_rate"]),
        rng=cell_rng(cfg.seed, "train"),
    )
    info = TrainingInfo("trained", time.perf_counter() - start, losses)
    target = cfg.tree["model"]["save_checkpoint"]
    if save and target and out_dir is not None:
        info.checkpoint = str(save_checkpoint(model, out_dir / target))
    return model, info


def load_datasets(cfg: ExperimentConfig) -> tuple[list[Dataset], list[dict]]:
    """Synthetic tables first, then CSV tables in config order; unusable tables become failures."""
    ds_cfg = cfg.tree["datasets"]
    ep_cfg = cfg.tree["episode"]
    tables: list[Table] = []
    failures: list[dict] = []
    n_synth = int(ds_cfg["synthetic"]["count"])
    if n_synth:
        prior = cfg.synthetic_prior
        for i in range(n_synth):
            tables.append(sample_task(prior, cell_rng(cfg.seed, "dataset", i), name=f"synthetic-{i}"))
    for i, entry in enumerate(ds_cfg["csv"]):
        path = Path(entry["path"])
        name = entry.get("name") or path.stem
        try:
            schema = load_schema(entry["schema"]) if entry.get("schema") else None
            raw = load_csv(path, entry["target"], schema)
            raw.name = name
            table = subsample_table(preprocess(raw), int(ds_cfg["max_rows"]), cell_rng(cfg.seed, "subsample", name))
            tables.append(table)
        except LayerLabError as exc:
            failures.append({"dataset": name, "intervention": "load", "error": str(exc)})
    names = [t.name for t in tables]
    if len(set(names)) != len(names):
        raise ConfigError(f"dataset names must be unique, got {names}")
    datasets = []
    for table in tables:
        try:
            ep = split_episode(
                table,
                float(ep_cfg["support_fraction"]),
                float(ep_cfg["probe_fraction"]),
                rng=cell_rng(cfg.seed, "split", table.name),
            )
            datasets.append(Dataset(table.name, standardize_episode(ep)))
        except LayerLabError as exc:
            failures.append({"dataset": table.name, "intervention": "split", "error": str(exc)})
    return datasets, failures


# cells


def _plans(intervention: str, n_layers: int, k: int) -> list[LayerPlan]:
    if intervention == "skip":
        return skip_grid(n_layers)
    if intervention == "swap":
        return swap_grid(n_layers)
    return repeat_grid(n_layers, k)


def _surgery_cell(model: Model, ds: Dataset, intervention: str, baseline: float, k: int) -> CellResult:
    cell = CellResult(ds.name, intervention)
    for plan in _plans(intervention, model.n_layers, k):
        try:
            auc = roc_auc(forward(model, ds.episode, plan).scores, ds.episode.query_y)
            cell.records.append(MetricRecord(ds.name, plan.label(), auc, baseline))
        except LayerLabError as exc:
            cell.failures.append(f"{plan.label()}: {exc}")
    return cell


def _early_exit_cell(model: Model, ds: Dataset, stack: EmbeddingStack, baseline: float) -> CellResult:
    cell = CellResult(ds.name, "early-exit")
    n_query = len(ds.episode.query_idx)
    for k in range(model.n_layers):
        try:
            logits = apply_decoder(model.decoder, stack.states[k + 1])[:n_query]
            auc = roc_auc(logits[:, 1] - logits[:, 0], ds.episode.query_y)
            cell.records.append(MetricRecord(ds.name, f"exit:{k}", auc, baseline))
        except LayerLabError as exc:
            cell.failures.append(f"exit:{k}: {exc}")
    return cell


def _probe_cell(model: Model, ds: Dataset, stack: EmbeddingStack, grid: dict) -> CellResult:
    cell = CellResult(ds.name, "probe")
    hyper = {
        "reg_strength": float(grid["linear_reg"]),
        "k": int(grid["knn_k"]),
        "steps": int(grid["decoder_steps"]),
        "learning_rate": float(grid["decoder_learning_rate"]),
    }
    for kind in grid["probe_kinds"]:
        try:
            tm = build_transfer_matrix(stack, kind, model=model, hyper=hyper)
        except LayerLabError as exc:
            cell.failures.append(f"{kind}: {exc}")
            continue
        cell.matrices[kind] = tm.auc
        cell.failures.extend(f"{kind} {msg}" for msg in tm.failures)
    return cell


def _cosine_cell(ds: Dataset, stack: EmbeddingStack) -> CellResult:
    cell = CellResult(ds.name, "cosine")
    try:
        cell.matrices["cosine"] = cosine_similarity_matrix(stack).matrix
    except LayerLabError as exc:
        cell.failures.append(str(exc))
    return cell


def _average(matrices: list[np.ndarray], depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Entry-wise mean over completed (non-NaN) values, plus the per-entry completed count."""
    if not matrices:
        return np.full((depth, depth), np.nan), np.zeros((depth, depth), dtype=np.int64)
    stack = np.stack(matrices)
    done = ~np.isnan(stack)
    count = done.sum(axis=0)
    total = np.where(done, stack, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return mean, count


def run_experiment(
    cfg: ExperimentConfig,
    model: Model | None = None,
    training: TrainingInfo | None = None,
    out_dir: Path | None = None,
    interventions: list[str] | None = None,
) -> ExperimentReport:
    started = time.perf_counter()
    if model is None:
        model, training = prepare_model(cfg, out_dir)
    training = training or TrainingInfo("provided")
    chosen = list(interventions if interventions is not None else cfg.interventions)
    datasets, failures = load_datasets(cfg)
    grid = cfg.grid
    k = int(grid["repeat_k"])
    L = model.n_layers

    # baselines (and captured stacks) exactly once per dataset
    baselines: dict[str, float] = {}
    stacks: dict[str, EmbeddingStack] = {}
    usable: list[Dataset] = []
    for ds in datasets:
        try:
            res = forward(model, ds.episode, capture=True)
            baselines[ds.name] = roc_auc(res.scores, ds.episode.query_y)
            stacks[ds.name] = res.stack
            usable.append(ds)
        except LayerLabError as exc:
            failures.append({"dataset": ds.name, "intervention": "baseline", "error": str(exc)})

    jobs = []
    for ds in usable:
        base = baselines[ds.name]
        for name in chosen:
            if name in SURGERY:
                jobs.append((_surgery_cell, (model, ds, name, base, k), ds, name))
            elif name == "early-exit":
                jobs.append((_early_exit_cell, (model, ds, stacks[ds.name], base), ds, name))
            elif name == "probe":
                jobs.append((_probe_cell, (model, ds, stacks[ds.name], grid), ds, name))
            elif name == "cosine":
                jobs.append((_cosine_cell, (ds, stacks[ds.name]), ds, name))

    def _run(job):
        fn, args, ds, name = job
        try:
            return fn(*args)
        except Exception as exc:  # isolate any cell crash
            return CellResult(ds.name, name, failures=[f"unexpected {type(exc).__name__}: {exc}"])

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            cells = list(pool.map(_run, jobs))
    else:
        cells = [_run(j) for j in jobs]

    order = {ds.name: i for i, ds in enumerate(usable)}
    iorder = {name: i for i, name in enumerate(chosen)}
    cells.sort(key=lambda c: (order[c.dataset], iorder.get(c.intervention, len(iorder))))

    records = [MetricRecord(name, "identity", baselines[name], baselines[name]) for name in baselines]
    for c in cells:
        records.extend(c.records)
        failures.extend({"dataset": c.dataset, "intervention": c.intervention, "error": e} for e in c.failures)

    transfer, transfer_counts, probe_completed = {}, {}, {}
    if "probe" in chosen:
        for kind in grid["probe_kinds"]:
            mats = [c.matrices[kind] for c in cells if c.intervention == "probe" and kind in c.matrices]
            transfer[kind], transfer_counts[kind] = _average(mats, L + 1)
            probe_completed[kind] = len(mats)
    cosine, cos_count = None, 0
    if "cosine" in chosen:
        mats = [c.matrices["cosine"] for c in cells if "cosine" in c.matrices]
        cosine, _ = _average(mats, L + 1)
        cos_count = len(mats)

    per_cell = {"skip": L, "swap": L * (L - 1) // 2, "repeat": L, "early-exit": L,
                "probe": len(grid["probe_kinds"]), "cosine": 1}
    expected = len(usable) * (1 + sum(per_cell[i] for i in chosen))
    report = ExperimentReport(
        config=cfg.tree,
        interventions=chosen,
        n_layers=L,
        datasets=[ds.name for ds in usable],
        baselines=baselines,
        records=records,
        transfer=transfer,
        transfer_counts=transfer_counts,
        probe_completed=probe_completed,
        cosine=cosine,
        cosine_count=cos_count,
        wtl={},
        failures=failures,
        seeds={"global": cfg.seed, "model_init": model.config.seed, "scheme": "SeedSequence([seed, crc32(key)...])"},
        timing={},
        training=training,
        expected_cells=expected,
    )
    for name in chosen:
        if name in RECORD_INTERVENTIONS:
            report.wtl[name] = win_tie_lose(report.records_for(name), cfg.tie_threshold)
    report.timing = {
        "training_seconds": training.seconds,
        "experiment_seconds": time.perf_counter() - started,
    }
    return report


def completed_cells(report: ExperimentReport) -> int:
    """Grid cells that produced a result: records, probe matrices and cosine matrices."""
    return len(report.records) + sum(report.probe_completed.values()) + report.cosine_count


__all__ = [
    "ExperimentReport",
    "TrainingInfo",
    "Dataset",
    "prepare_model",
    "load_datasets",
    "run_experiment",
    "completed_cells",
]

