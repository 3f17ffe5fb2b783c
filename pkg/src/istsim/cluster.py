"""Bulk-synchronous simulation of an n-site cluster.

Three strategies over the same data placement and batch schedule:

  ist            per sync round, sample a membership plan, scatter disjoint
                 weight shards, run J local SGD steps on each thin subnet,
                 gather and reassemble
  data_parallel  full replicas, gradients averaged every step
  local_sgd      full replicas trained J steps, then parameter-averaged

All cross-site flow happens at coordinator barriers, and the ledger counts
every float that crosses (logical inflow/outflow counts, not a byte-level
all-reduce model, so the closed-form traffic formulas can be cross-checked
exactly). Workers own their RNGs and share no mutable state, so the threaded
execution mode must produce bit-identical results to the sequential one.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .masks import ConfigError, sample_plan
from .nn import Model
from .partition import (
    SubnetShard,
    extract_shards,
    reassemble,
    shard_float_count,
    shard_from_subnet,
    shard_weight_count,
    subnet_model,
)

STRATEGIES = ("ist", "data_parallel", "local_sgd")
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class SyncConfig:
    strategy: str
    n_sites: int
    local_iters: int = 1  # J; ignored by data_parallel
    batch: int = 32  # B
    eta: float = 0.1
    epochs: int = 1
    seed: int = 0
    mask_strategy: str = "balanced"
    loss: str = "cross_entropy"
    workers: str = "sequential"  # "sequential" (reference) or "threads"
    calibration_size: int = 256

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.n_sites < 1:
            raise ConfigError("n_sites must be >= 1")
        if self.local_iters < 1:
            raise ConfigError("local_iters must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.eta <= 0:
            raise ConfigError("eta must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.workers not in ("sequential", "threads"):
            raise ConfigError(f"unknown worker mode {self.workers!r}")


@dataclass
class CommLedger:
    """Exact logical float counts crossing the coordinator boundary."""

    floats_to_workers: int = 0
    floats_to_coordinator: int = 0
    weight_floats_to_workers: int = 0
    weight_floats_to_coordinator: int = 0
    messages: int = 0
    sync_rounds: int = 0
    flops_forward_backward: int = 0

    def total_floats(self) -> int:
        return self.floats_to_workers + self.floats_to_coordinator

    def snapshot(self) -> dict[str, int]:
        return dict(asdict(self))


@dataclass
class WorkerState:
    """One site: its index, data partition, and private RNG."""

    site: int
    rng: np.random.Generator
    epoch_order: np.ndarray | None = None  # shard rows in draw order


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    test_loss: float
    test_acc: float
    ledger: dict[str, int]  # cumulative snapshot at epoch end


@dataclass
class TrainReport:
    config: dict
    epochs: list[EpochMetrics] = field(default_factory=list)
    ledger: CommLedger = field(default_factory=CommLedger)
    plan_seeds: list[int] = field(default_factory=list)
    final_model: Model | None = field(default=None, repr=False)

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "epochs": [asdict(m) for m in self.epochs],
            "ledger": self.ledger.snapshot(),
            "plan_seeds": list(self.plan_seeds),
        }
        return json.dumps(payload, sort_keys=True, indent=2)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, report: TrainReport | None = None):
        super().__init__(message)
        self.report = report


def evaluate(
    model: Model, features: np.ndarray, labels: np.ndarray, loss: str = "cross_entropy"
) -> tuple[float, float]:
    """Deterministic (loss, accuracy) on a split; standardizers must be frozen."""
    if features.shape[0] == 0:
        raise ValueError("empty evaluation split")
    if any(s.mode != "frozen" for s in model.standardizers):
        raise ValueError("evaluate requires frozen standardizers; calibrate first")
    logits = nn.forward(model, features).logits
    if loss == "cross_entropy":
        value = nn.softmax_cross_entropy(logits, labels)[0]
    else:
        value = nn.mse_loss(logits, labels)[0]
    acc = float((logits.argmax(axis=1) == labels).mean())
    return value, acc


def _check_loss(value: float) -> None:
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise DivergenceError(f"training loss diverged ({value})")


def _local_sgd(
    net: Model,
    features: np.ndarray,
    labels: np.ndarray,
    rows: list[np.ndarray],
    cfg: SyncConfig,
) -> Model:
    """Run len(rows) SGD steps on one worker's model; pure function of inputs."""
    for r in rows:
        cache = nn.forward(net, features[r])
        batch_loss = (
            nn.softmax_cross_entropy(cache.logits, labels[r])[0]
            if cfg.loss == "cross_entropy"
            else nn.mse_loss(cache.logits, labels[r])[0]
        )
        _check_loss(batch_loss)
        grads = nn.backward(net, cache, labels[r], cfg.loss)
        net = nn.sgd_step(net, grads, cfg.eta)
    return net


def _map_workers(cfg: SyncConfig, fn, n: int) -> list:
    if cfg.workers == "threads" and n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(s) for s in range(n)]


def _matmul_flops(dims: nn.ModelDims, batch: int) -> int:
    # Forward + backward matrix-multiply cost model: 4 * B * sum N_{l-1} N_l.
    w = dims.widths
    return 4 * batch * sum(w[l - 1] * w[l] for l in range(1, len(w)))


class _Run:
    """State shared by the strategy runners: placement, schedule, metering."""

    def __init__(self, model: Model, dataset: Dataset, cfg: SyncConfig):
        self.cfg = cfg
        self.train_x, self.train_y = dataset.train()
        self.test_x, self.test_y = dataset.test()
        # Calibration subset: a fixed slice of the canonical train split so
        # every strategy (and every repetition) standardizes identically.
        k = min(cfg.calibration_size, self.train_x.shape[0])
        self.calib = self.train_x[:k]
        root = np.random.SeedSequence(cfg.seed)
        placement_ss, plan_ss, workers_ss = root.spawn(3)
        self.placement_rng = np.random.default_rng(placement_ss)
        self.plan_rng = np.random.default_rng(plan_ss)
        self.workers = [
            WorkerState(site=s, rng=np.random.default_rng(ss))
            for s, ss in enumerate(workers_ss.spawn(cfg.n_sites))
        ]
        # The execution mode is a runtime knob that must not affect results
        # (that is the bulk-synchronous contract), so it is not part of the
        # experiment identity echoed in the report.
        echo = asdict(cfg)
        echo.pop("workers")
        self.report = TrainReport(config=echo, ledger=CommLedger())

    def start_epoch(self) -> int:
        """Shuffle, split into per-site shards, fix each worker's draw order.

        Returns the common per-worker step count for the epoch.
        """
        cfg = self.cfg
        perm = self.placement_rng.permutation(len(self.train_y))
        shards = np.array_split(perm, cfg.n_sites)
        steps = min(len(s) // cfg.batch for s in shards)
        if steps == 0:
            raise ConfigError("batch size exceeds a worker's data shard")
        for w, rows in zip(self.workers, shards):
            w.epoch_order = w.rng.permutation(rows)
        return steps

    def batch_rows(self, site: int, step: int) -> np.ndarray:
        b = self.cfg.batch
        return self.workers[site].epoch_order[step * b : (step + 1) * b]

    def finish_epoch(self, epoch: int, model: Model) -> Model:
        """Calibrate on the full network, evaluate, append metrics."""
        calibrated = nn.calibrate_standardizers(model, self.calib)
        train_loss, _ = evaluate(calibrated, self.train_x, self.train_y, self.cfg.loss)
        test_loss, test_acc = evaluate(calibrated, self.test_x, self.test_y, self.cfg.loss)
        self.report.epochs.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=train_loss,
                test_loss=test_loss,
                test_acc=test_acc,
                ledger=self.report.ledger.snapshot(),
            )
        )
        if not np.isfinite(train_loss) or train_loss > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"epoch {epoch} train loss diverged ({train_loss})", self.report
            )
        return calibrated


def run_ist(model: Model, dataset: Dataset, cfg: SyncConfig) -> TrainReport:
    """Subnet training: sample plan, scatter shards, J local steps, reassemble."""
    if cfg.strategy != "ist":
        raise ConfigError("run_ist requires strategy 'ist'")
    if cfg.mask_strategy == "balanced" and cfg.n_sites > min(model.dims.hidden):
        raise ConfigError("balanced plans need n_sites <= min hidden width")
    run = _Run(model, dataset, cfg)
    ledger = run.report.ledger
    current = model
    try:
        for epoch in range(1, cfg.epochs + 1):
            steps = run.start_epoch()
            done = 0
            while done < steps:
                k = min(cfg.local_iters, steps - done)
                plan_seed = int(run.plan_rng.integers(0, 2**63 - 1))
                run.report.plan_seeds.append(plan_seed)
                plan = sample_plan(
                    current.dims, cfg.n_sites, cfg.mask_strategy, plan_seed
                )
                shards = extract_shards(current, plan)
                for sh in shards:
                    ledger.floats_to_workers += shard_float_count(sh)
                    ledger.weight_floats_to_workers += shard_weight_count(sh)
                    ledger.messages += 1

                base = done

                def train_site(s: int, _shards=shards, _base=base, _k=k) -> Model:
                    net = subnet_model(_shards[s], current)
                    rows = [run.batch_rows(s, _base + j) for j in range(_k)]
                    return _local_sgd(net, run.train_x, run.train_y, rows, cfg)

                trained = _map_workers(cfg, train_site, cfg.n_sites)
                updated: list[SubnetShard] = []
                for sh, net in zip(shards, trained):
                    new_shard = shard_from_subnet(sh, net)
                    updated.append(new_shard)
                    ledger.floats_to_coordinator += shard_float_count(new_shard)
                    ledger.weight_floats_to_coordinator += shard_weight_count(new_shard)
                    ledger.messages += 1
                    ledger.flops_forward_backward += _matmul_flops(net.dims, cfg.batch) * k
                current = reassemble(current, updated, plan)
                ledger.sync_rounds += 1
                done += k
            current = run.finish_epoch(epoch, current)
    except DivergenceError as exc:
        raise DivergenceError(str(exc), run.report) from None
    run.report.final_model = current
    return run.report


def run_data_parallel(model: Model, dataset: Dataset, cfg: SyncConfig) -> TrainReport:
    """Full replicas; gradients averaged by the coordinator every step."""
    if cfg.strategy != "data_parallel":
        raise ConfigError("run_data_parallel requires strategy 'data_parallel'")
    run = _Run(model, dataset, cfg)
    ledger = run.report.ledger
    current = nn.set_standardizer_mode(model, "batch_stats")
    n = cfg.n_sites
    model_floats = model.float_count()
    weight_floats = model.weight_float_count()
    step_flops = _matmul_flops(model.dims, cfg.batch)
    try:
        for epoch in range(1, cfg.epochs + 1):
            steps = run.start_epoch()
            for step in range(steps):

                def site_grads(s: int, _step=step) -> nn.Gradients:
                    rows = run.batch_rows(s, _step)
                    cache = nn.forward(current, run.train_x[rows])
                    batch_loss = (
                        nn.softmax_cross_entropy(cache.logits, run.train_y[rows])[0]
                        if cfg.loss == "cross_entropy"
                        else nn.mse_loss(cache.logits, run.train_y[rows])[0]
                    )
                    _check_loss(batch_loss)
                    return nn.backward(current, cache, run.train_y[rows], cfg.loss)

                grads = _map_workers(cfg, site_grads, n)
                mean_grad = grads[0] if n == 1 else nn.average_gradients(grads)
                current = nn.sgd_step(current, mean_grad, cfg.eta)
                # Logical inflow accounting: the full model goes to every
                # site each step, one gradient set comes back from every site.
                ledger.floats_to_workers += n * model_floats
                ledger.weight_floats_to_workers += n * weight_floats
                ledger.floats_to_coordinator += n * model_floats
                ledger.weight_floats_to_coordinator += n * weight_floats
                ledger.messages += 2 * n
                ledger.sync_rounds += 1
                ledger.flops_forward_backward += n * step_flops
            calibrated = run.finish_epoch(epoch, current)
            current = nn.set_standardizer_mode(calibrated, "batch_stats")
    except DivergenceError as exc:
        raise DivergenceError(str(exc), run.report) from None
    run.report.final_model = calibrated
    return run.report


def _average_models(models: list[Model]) -> Model:
    if len(models) == 1:
        return models[0]
    k = len(models)
    layers = []
    for i in range(models[0].dims.n_layers):
        w = sum(m.layers[i].weights for m in models) / k
        b = sum(m.layers[i].bias for m in models) / k
        layers.append(nn.Layer(w, b))
    return Model(
        models[0].dims, tuple(layers), models[0].activation, models[0].standardizers
    )


def run_local_sgd(model: Model, dataset: Dataset, cfg: SyncConfig) -> TrainReport:
    """Full replicas trained J steps locally, then parameter-averaged."""
    if cfg.strategy != "local_sgd":
        raise ConfigError("run_local_sgd requires strategy 'local_sgd'")
    run = _Run(model, dataset, cfg)
    ledger = run.report.ledger
    current = nn.set_standardizer_mode(model, "batch_stats")
    n = cfg.n_sites
    model_floats = model.float_count()
    weight_floats = model.weight_float_count()
    try:
        for epoch in range(1, cfg.epochs + 1):
            steps = run.start_epoch()
            done = 0
            while done < steps:
                k = min(cfg.local_iters, steps - done)
                ledger.floats_to_workers += n * model_floats
                ledger.weight_floats_to_workers += n * weight_floats
                ledger.messages += n

                base = done

                def train_site(s: int, _base=base, _k=k) -> Model:
                    rows = [run.batch_rows(s, _base + j) for j in range(_k)]
                    return _local_sgd(current, run.train_x, run.train_y, rows, cfg)

                replicas = _map_workers(cfg, train_site, n)
                current = _average_models(replicas)
                ledger.floats_to_coordinator += n * model_floats
                ledger.weight_floats_to_coordinator += n * weight_floats
                ledger.messages += n
                ledger.sync_rounds += 1
                ledger.flops_forward_backward += n * _matmul_flops(model.dims, cfg.batch) * k
                done += k
            calibrated = run.finish_epoch(epoch, current)
            current = nn.set_standardizer_mode(calibrated, "batch_stats")
    except DivergenceError as exc:
        raise DivergenceError(str(exc), run.report) from None
    run.report.final_model = calibrated
    return run.report


def run(model: Model, dataset: Dataset, cfg: SyncConfig) -> TrainReport:
    """Dispatch on cfg.strategy."""
    runner = {
        "ist": run_ist,
        "data_parallel": run_data_parallel,
        "local_sgd": run_local_sgd,
    }[cfg.strategy]
    return runner(model, dataset, cfg)
