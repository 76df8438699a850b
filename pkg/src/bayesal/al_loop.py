"""Pool-based active learning: seed set, per-stage candidate subsets, retraining.

Every random draw is keyed by ``(master seed, trial, stage, purpose)`` so that
all strategies of one trial share the seed set, the model initialization and
the training stream, and differ only in what they acquire.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acquisition, model
from .config import ExperimentConfig
from .data import Dataset, NormStats, SyntheticSpec, fit_norm_stats, generate_synthetic, load_dataset

log = logging.getLogger(__name__)

TRIALS_FILE = "trials.csv"
SUMMARY_FILE = "summary.csv"

# purposes for derived seeds
_INIT, _TRAIN, _SUBSET, _MC, _RANDOM, _SEED_SET = range(6)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


class LabeledView:
    """Features of the whole training set, targets of annotated indices only."""

    def __init__(self, dataset: Dataset, labeled):
        self._ds = dataset
        self.labeled = tuple(int(i) for i in labeled)
        self._allowed = frozenset(self.labeled)

    @property
    def K(self) -> int:
        return self._ds.K

    def features(self, indices) -> np.ndarray:
        return self._ds.features[np.asarray(indices, dtype=np.int64)]

    def targets(self, indices) -> np.ndarray:
        idx = [int(i) for i in indices]
        hidden = [i for i in idx if i not in self._allowed]
        if hidden:
            raise PermissionError(f"target of unlabeled index {hidden[0]} requested before annotation")
        return self._ds.targets[np.asarray(idx, dtype=np.int64)]

    def annotate(self, indices) -> "LabeledView":
        return LabeledView(self._ds, self.labeled + tuple(int(i) for i in indices))


@dataclass(frozen=True)
class Task:
    """Normalized training pool, normalized test set and the stats to undo the scaling."""

    train: Dataset
    test: Dataset
    stats: NormStats


@dataclass(frozen=True)
class ALState:
    labeled: tuple
    pool: tuple
    stage: int = 0
    initial_pool_size: int = 0
    exhausted: bool = False


@dataclass(frozen=True)
class StageRecord:
    stage: int
    labeled_count: int
    test_mse: float
    train_loss_final: float
    wall_time: float
    pool_exhausted: bool = False


@dataclass
class Report:
    strategies: tuple
    trials: int
    records: dict = field(default_factory=dict)  # (strategy, trial) -> list[StageRecord]

    def summary(self) -> list:
        """Rows ``(strategy, stage, mean_mse, std_mse)``; std is the sample std over trials."""
        rows = []
        for s in self.strategies:
            per_trial = [self.records[(s, t)] for t in range(self.trials)]
            for stage in range(len(per_trial[0])):
                vals = np.array([recs[stage].test_mse for recs in per_trial])
                std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                rows.append((s, stage, float(vals.mean()), std))
        return rows

    def final(self, strategy: str) -> tuple:
        row = [r for r in self.summary() if r[0] == strategy][-1]
        return row[2], row[3]


def build_task(cfg: ExperimentConfig) -> Task:
    if cfg.data_source == "synthetic":
        spec = SyntheticSpec(
            n=cfg.data_n, D=cfg.data_D, K=cfg.data_K,
            noise_profile=cfg.data_noise_profile, noise_sd=cfg.data_noise_sd,
            target_fn_seed=cfg.data_target_fn_seed, feature_dist=cfg.data_feature_dist,
        )
        train = generate_synthetic(spec, derive_seed(cfg.seed_master, 0xDA7A, 0)).dataset
        test_spec = SyntheticSpec(**{**spec.__dict__, "n": cfg.data_n_test})
        test = generate_synthetic(test_spec, derive_seed(cfg.seed_master, 0xDA7A, 1)).dataset
    else:
        full = load_dataset(cfg.data_path)
        if cfg.data_test_path:
            train, test = full, load_dataset(cfg.data_test_path)
        else:
            rng = np.random.default_rng(derive_seed(cfg.seed_master, 0xDA7A, 2))
            order = rng.permutation(full.n)
            n_test = max(1, int(round(cfg.data_test_fraction * full.n)))
            test, train = full.subset(np.sort(order[:n_test])), full.subset(np.sort(order[n_test:]))
    stats = fit_norm_stats(train.targets)
    return Task(
        Dataset(train.features, stats.normalize(train.targets), train.K),
        Dataset(test.features, stats.normalize(test.targets), test.K),
        stats,
    )


def _model_params(cfg: ExperimentConfig, D: int, K: int, seed: int) -> model.ModelParams:
    return model.init_params(
        D, K, cfg.model_hidden,
        heteroscedastic=cfg.model_loss_kind == "heteroscedastic",
        dropout_mode=cfg.model_dropout_mode, dropout_rate=cfg.model_dropout_rate,
        alpha_per=cfg.model_alpha_per, seed=seed,
    )


def predict_mean(params: model.ModelParams, X, M: int, seed: int) -> np.ndarray:
    """MC-averaged prediction when dropout is active, else the deterministic pass."""
    if model.dropout_sites(params):
        return model.mc_predict(params, X, M, seed).mean
    return model.forward(params, X)[0]


def test_mse(params: model.ModelParams, task: Task, M: int, seed: int) -> float:
    """Per-joint squared error on the test set, in raw target units."""
    pred = task.stats.denormalize(predict_mean(params, task.test.features, M, seed))
    truth = task.stats.denormalize(task.test.targets)
    return model.mse_value(truth, pred, task.test.K)


def fit(cfg: ExperimentConfig, view: LabeledView, seed_keys: tuple):
    """Train a fresh model on the annotated part of ``view``."""
    labeled = list(view.labeled)
    X, Y = view.features(labeled), view.targets(labeled)
    params = _model_params(cfg, X.shape[1], view.K, derive_seed(*seed_keys, _INIT))
    tcfg = model.TrainConfig(
        learning_rate=cfg.train_lr, batch_size=cfg.train_batch, epochs=cfg.train_epochs,
        loss_kind=cfg.model_loss_kind, seed=derive_seed(*seed_keys, _TRAIN),
    )
    return model.train(params, X, Y, tcfg)


def pool_predictions(params, view: LabeledView, indices, M: int, seed: int) -> acquisition.PoolPredictions:
    pred = model.mc_predict(params, view.features(indices), M, seed, indices=indices)
    return acquisition.PoolPredictions.from_prediction(indices, pred)


def run_stage(
    state: ALState,
    view: LabeledView,
    task: Task,
    cfg: ExperimentConfig,
    strategy: str,
    trial: int,
    acquire: bool = True,
):
    """Train, evaluate, then (if ``acquire``) select and annotate one batch.

    Returns ``(new_state, new_view, record, params)``.
    """
    t0 = time.perf_counter()
    keys = (cfg.seed_master, trial, state.stage)
    params, history = fit(cfg, view, keys)
    mse = test_mse(params, task, cfg.model_M, derive_seed(*keys, _MC, 1))

    exhausted = state.exhausted
    new_state, new_view = state, view
    if acquire:
        B = cfg.al_budget
        pool = np.array(state.pool, dtype=np.int64)
        chosen = []
        if B > 0 and pool.size:
            subset_keys = keys if cfg.al_share_subsets else (*keys, acquisition.STRATEGIES.index(strategy) + 1)
            rng = np.random.default_rng(derive_seed(*subset_keys, _SUBSET))
            size = min(pool.size, math.ceil(cfg.al_subset_fraction * state.initial_pool_size))
            subset = np.sort(rng.choice(pool, size=size, replace=False))
            if size < B:
                exhausted = True
            mc_seed = derive_seed(*keys, _MC, 0)
            labeled_pp = None
            if strategy == "random":
                pool_pp = acquisition.PoolPredictions(subset, np.zeros((size, 1)), np.zeros((size, 1)))
            else:
                pool_pp = pool_predictions(params, view, subset, cfg.model_M, mc_seed)
                if strategy in ("coreset", "cke"):
                    labeled_pp = pool_predictions(params, view, list(view.labeled), cfg.model_M, mc_seed)
            result = acquisition.select(
                strategy, labeled_pp, pool_pp, B,
                eta=cfg.al_eta, line6=cfg.al_line6,
                rng=np.random.default_rng(derive_seed(*keys, _RANDOM)),
            )
            chosen = result.chosen
        elif B > 0:
            exhausted = True
        taken = set(chosen)
        new_view = view.annotate(chosen)
        new_state = ALState(
            labeled=state.labeled + tuple(chosen),
            pool=tuple(i for i in state.pool if i not in taken),
            stage=state.stage + 1,
            initial_pool_size=state.initial_pool_size,
            exhausted=exhausted,
        )
    record = StageRecord(
        stage=state.stage,
        labeled_count=len(state.labeled),
        test_mse=mse,
        train_loss_final=float(history[-1]),
        wall_time=time.perf_counter() - t0,
        pool_exhausted=exhausted,
    )
    return new_state, new_view, record, params


def initial_state(task: Task, cfg: ExperimentConfig, trial: int) -> ALState:
    n = task.train.n
    rng = np.random.default_rng(derive_seed(cfg.seed_master, trial, _SEED_SET))
    size = min(n, cfg.seed_size)
    if size < 1:
        raise ValueError("seed set must contain at least one sample")
    seed_set = tuple(int(i) for i in np.sort(rng.choice(n, size=size, replace=False)))
    taken = set(seed_set)
    return ALState(seed_set, tuple(i for i in range(n) if i not in taken), 0, n - size)


def run_trial(task: Task, cfg: ExperimentConfig, strategy: str, trial: int, on_record=None) -> list:
    state = initial_state(task, cfg, trial)
    view = LabeledView(task.train, state.labeled)
    records = []
    for stage in range(cfg.al_stages + 1):
        state, view, rec, _ = run_stage(state, view, task, cfg, strategy, trial, acquire=stage < cfg.al_stages)
        records.append(rec)
        log.info("%s trial %d stage %d: n=%d mse=%.6g (%.1fs)", strategy, trial, rec.stage,
                 rec.labeled_count, rec.test_mse, rec.wall_time)
        if on_record is not None:
            on_record(strategy, trial, rec)
    return records


def _trial_job(args):
    task, cfg, strategy, trial = args
    return (strategy, trial), run_trial(task, cfg, strategy, trial)


def run_experiment(cfg: ExperimentConfig, task: Task | None = None, jobs: int = 1, on_record=None) -> Report:
    """All strategies x trials; the report is a pure function of ``cfg``."""
    task = build_task(cfg) if task is None else task
    if cfg.seed_size > task.train.n:
        raise ValueError(f"seed set size {cfg.seed_size} exceeds the training pool ({task.train.n})")
    report = Report(tuple(cfg.al_strategies), cfg.al_trials)
    jobs_list = [(task, cfg, s, t) for s in cfg.al_strategies for t in range(cfg.al_trials)]
    if jobs <= 1:
        for task_, cfg_, s, t in jobs_list:
            report.records[(s, t)] = run_trial(task_, cfg_, s, t, on_record)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, recs in pool.map(_trial_job, jobs_list):
                report.records[key] = recs
                if on_record is not None:
                    for rec in recs:
                        on_record(key[0], key[1], rec)
    return report


# -- report files -------------------------------------------------------------


def trial_rows(report: Report) -> list:
    rows = []
    for s in report.strategies:
        for t in range(report.trials):
            for rec in report.records[(s, t)]:
                rows.append((s, t, rec.stage, rec.labeled_count, rec.test_mse))
    return rows


def format_trial_row(row) -> str:
    s, t, stage, count, mse = row
    return f"{s},{t},{stage},{count},{mse!r}\n"


def write_trials(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("strategy,trial,stage,labeled_count,test_mse\n")
        fh.writelines(format_trial_row(r) for r in rows)


def summarize_rows(rows) -> list:
    """Aggregate trial rows into ``(strategy, stage, mean, sample std)`` rows."""
    groups: dict = {}
    for s, t, stage, _, mse in rows:
        groups.setdefault((s, stage), {})[t] = mse
    strategies = list(dict.fromkeys(r[0] for r in rows))
    out = []
    for key in sorted(groups, key=lambda k: (strategies.index(k[0]), k[1])):
        vals = np.array([groups[key][t] for t in sorted(groups[key])])
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out.append((key[0], key[1], float(vals.mean()), std))
    return out


def write_summary(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("strategy,stage,mean_mse,std_mse\n")
        for s, stage, mean, std in rows:
            fh.write(f"{s},{stage},{mean!r},{std!r}\n")


def read_trials(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "strategy,trial,stage,labeled_count,test_mse":
            raise ValueError(f"{path}:1: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 columns, found {len(parts)}")
            try:
                rows.append((parts[0], int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4])))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {line.strip()!r}") from None
    return rows


def write_report(report: Report, outdir) -> tuple:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = trial_rows(report)
    write_trials(rows, outdir / TRIALS_FILE)
    write_summary(summarize_rows(rows), outdir / SUMMARY_FILE)
    return outdir / TRIALS_FILE, outdir / SUMMARY_FILE
