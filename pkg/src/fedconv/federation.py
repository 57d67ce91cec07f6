"""The federated loop: pre-train, compress, train on clients, dilate, aggregate.

The server side of a round only ever sees what clients upload (their
parameter sets and sample counts).  Client datasets live inside
:class:`ClientProfile` objects and are only touched by :func:`client_update`.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aggregation as agg
from . import compression as comp
from . import dilation as dil
from .config import ExperimentConfig
from .data import Dataset, gen_synthetic, load_idx, load_mnist_subset
from .errors import ConfigurationError, FedConvError, UsageError
from .models import ModelSpec, cnn_spec, evaluate, init_params, local_train, validate_params
from .serialization import save

SPLIT_NAMES = ("server_train", "server_test", "client_pool_train", "client_pool_test")
SPLIT_FRACTIONS = (0.05, 0.20, 0.70, 0.05)
MNIST_MEAN, MNIST_STD = 0.1307, 0.3081


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def split_indices(labels: np.ndarray, seed: int, fractions=SPLIT_FRACTIONS) -> dict[str, np.ndarray]:
    """Stratified disjoint index sets, split per class at the cumulative fractions."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    bounds = np.cumsum((0.0,) + tuple(fractions))
    parts = [[] for _ in fractions]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < round(1 / min(fractions)):
            raise ConfigurationError(f"class {c} has {len(idx)} samples, too few to stratify")
        cuts = np.floor(bounds * len(idx) + 0.5).astype(int)
        for i in range(len(fractions)):
            parts[i].append(idx[cuts[i]:cuts[i + 1]])
    return {name: np.sort(np.concatenate(p)) for name, p in zip(SPLIT_NAMES, parts)}


def stratified_sample(labels: np.ndarray, n: int, seed: int) -> np.ndarray:
    """About ``n`` indices keeping the class proportions of ``labels``."""
    rng = np.random.default_rng(seed)
    frac = n / len(labels)
    keep = [rng.permutation(np.flatnonzero(labels == c))[:int(np.floor(frac * np.sum(labels == c) + 0.5))]
            for c in np.unique(labels)]
    return np.sort(np.concatenate(keep))


def split_dataset(data: Dataset, seed: int) -> dict[str, Dataset]:
    """server_train / server_test / client_pool_train / client_pool_test at 5/20/70/5 percent."""
    return {k: data.subset(v) for k, v in split_indices(data.y, seed).items()}


def dirichlet_proportions(num_classes: int, n_clients: int, alpha: float, rng) -> np.ndarray:
    """[num_classes, n_clients]; row c is class c's share per client."""
    return rng.dirichlet(np.full(n_clients, alpha), size=num_classes)


def allocate(labels: np.ndarray, proportions: np.ndarray, rng) -> list[np.ndarray]:
    """Deal each class's (shuffled) samples to clients according to ``proportions``."""
    n_clients = proportions.shape[1]
    parts = [[] for _ in range(n_clients)]
    for c in range(proportions.shape[0]):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cuts = np.floor(np.cumsum(proportions[c]) * len(idx) + 0.5).astype(int)
        cuts[-1] = len(idx)
        start = 0
        for j in range(n_clients):
            parts[j].append(idx[start:cuts[j]])
            start = cuts[j]
    return [np.sort(np.concatenate(p)).astype(np.intp) for p in parts]


def partition_dirichlet(labels: np.ndarray, n_clients: int, alpha: float, seed: int, num_classes=None,
                        max_tries: int = 1000) -> tuple[list[np.ndarray], np.ndarray]:
    """Non-IID client partitions of a label array.

    Returns ``(index arrays, proportions)``.  Draws in which some client ends
    up empty are rejected and redrawn.
    """
    labels = np.asarray(labels)
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    if n_clients < 1:
        raise ConfigurationError("need at least one client")
    if n_clients > len(labels):
        raise ConfigurationError(f"{n_clients} clients but only {len(labels)} samples")
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        props = dirichlet_proportions(num_classes, n_clients, alpha, rng)
        parts = allocate(labels, props, rng)
        if all(len(p) > 0 for p in parts):
            return parts, props
    raise ConfigurationError(f"could not give every client a sample in {max_tries} draws")


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "mnist-subset":
        data = load_mnist_subset()
    elif cfg.dataset == "idx":
        data = load_idx(cfg.idx_images, cfg.idx_labels)
    else:
        data = gen_synthetic(cfg.synthetic_classes, cfg.synthetic_per_class, cfg.synthetic_shape,
                             cfg.synthetic_separation, cfg.sub_seed("split"))
    x = data.x
    if cfg.downsample > 1:
        f = cfg.downsample
        n, c, h, w = x.shape
        x = x[:, :, :h - h % f, :w - w % f].reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    if cfg.standardize and cfg.dataset != "synthetic":
        x = (x - MNIST_MEAN) / MNIST_STD
    data = Dataset(x, data.y, data.num_classes)
    if cfg.max_samples is not None and cfg.max_samples < len(data):
        data = data.subset(stratified_sample(data.y, cfg.max_samples, cfg.sub_seed("split")))
    return data


def build_spec(cfg: ExperimentConfig, data: Dataset) -> ModelSpec:
    return cnn_spec(tuple(data.x.shape[1:]), cfg.conv_channels, cfg.kernel, 1, cfg.pool, data.num_classes)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    sr: float
    train: Dataset = field(repr=False)
    test: Dataset | None = field(repr=False)
    seed: int

    @property
    def sample_count(self) -> int:
        return len(self.train)


@dataclass
class FederationState:
    """Mutable server state; ``round`` counts completed rounds."""

    spec: ModelSpec
    global_params: dict
    conv_params: dict  # sr -> compression parameters (one set per device type)
    clients: list[ClientProfile]
    round: int = 0
    pretrained: bool = False
    last_uploads: dict = field(default_factory=dict)  # client id -> uploaded parameters


@dataclass(frozen=True)
class Environment:
    """Everything fixed for a whole experiment."""

    cfg: ExperimentConfig
    spec: ModelSpec
    server_train: Dataset
    server_test: Dataset
    plans: dict  # sr -> CompressionPlan


def pipeline_options(cfg: ExperimentConfig) -> comp.PipelineOptions:
    if cfg.identity_pipelines:
        return comp.PipelineOptions(use_pre=False, use_mlr=False, use_weight_norm=False, use_scheduler=False)
    return comp.PipelineOptions(cfg.use_pre, cfg.use_mlr, cfg.use_weight_norm, cfg.use_scheduler,
                                cfg.s_p, cfg.s_n, cfg.kernel_init)


def schedule(cfg: ExperimentConfig) -> comp.Schedule:
    return comp.Schedule(cfg.t_max, cfg.lr_min, cfg.lr_max)


def assign_srs(n_clients: int, grid: Sequence[float]) -> list[float]:
    """Round-robin over the SR grid, so each device type gets an equal share of clients."""
    return [grid[i % len(grid)] for i in range(n_clients)]


def make_clients(cfg: ExperimentConfig, pool_train: Dataset, pool_test: Dataset | None) -> list[ClientProfile]:
    parts, props = partition_dirichlet(pool_train.y, cfg.n_clients, cfg.alpha, cfg.sub_seed("partition"),
                                       pool_train.num_classes)
    tests = [None] * cfg.n_clients
    if pool_test is not None:
        rng = np.random.default_rng([cfg.sub_seed("partition"), 1])
        tests = [pool_test.subset(p) if len(p) else None for p in allocate(pool_test.y, props, rng)]
    srs = assign_srs(cfg.n_clients, cfg.sr_grid)
    seeds = np.random.SeedSequence(cfg.sub_seed("training")).generate_state(cfg.n_clients)
    return [ClientProfile(j, srs[j], pool_train.subset(parts[j]), tests[j], int(seeds[j]))
            for j in range(cfg.n_clients)]


def setup(cfg: ExperimentConfig, data: Dataset | None = None) -> tuple[Environment, FederationState]:
    data = load_dataset(cfg) if data is None else data
    splits = split_dataset(data, cfg.sub_seed("split"))
    spec = build_spec(cfg, data)
    init_rng = np.random.default_rng(cfg.sub_seed("init"))
    global_params = init_params(spec, init_rng)
    plans, conv_params = {}, {}
    opts = pipeline_options(cfg)
    for sr in sorted(set(cfg.sr_grid)):
        plan = comp.derive_plan(spec, sr, cfg.stride, cfg.padding)
        plans[sr] = plan
        if cfg.identity_pipelines:
            conv_params[sr] = comp.identity_pipeline_params(plan)
        else:
            conv_params[sr] = comp.init_pipeline_params(plan, init_rng, opts)
    clients = make_clients(cfg, splits["client_pool_train"], splits["client_pool_test"])
    env = Environment(cfg, spec, splits["server_train"], splits["server_test"], plans)
    return env, FederationState(spec, global_params, conv_params, clients)


# ---------------------------------------------------------------------------
# round steps
# ---------------------------------------------------------------------------

class RoundError(FedConvError):
    """A round step failed; the message names the step."""


def _step(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FedConvError as exc:
        raise RoundError(f"{name}: {exc}") from exc
    except (ValueError, ArithmeticError, FloatingPointError) as exc:
        raise RoundError(f"{name}: {exc}") from exc


def _round_seed(base: int, r: int, *extra: int) -> int:
    return int(np.random.SeedSequence([base, r, *extra]).generate_state(1)[0])


def pretrain_global(env: Environment, state: FederationState, epochs: int) -> FederationState:
    """Train the global model on the server's split before the first round."""
    if state.round != 0 or state.pretrained:
        raise UsageError("pre-training is only allowed before round 1")
    cfg = env.cfg
    if epochs > 0:
        state.global_params = local_train(env.spec, state.global_params, env.server_train, epochs, cfg.local_lr,
                                          _round_seed(cfg.sub_seed("training"), 0, 1), cfg.batch_size,
                                          cfg.optimizer)
    state.pretrained = True
    return state


def client_update(client: ClientProfile, sub_spec: ModelSpec, params: dict, cfg: ExperimentConfig,
                  r: int) -> tuple[dict, int, float | None]:
    """Local training on one client; returns (parameters, s_j, accuracy on the client's test split)."""
    trained = local_train(sub_spec, params, client.train, cfg.local_epochs, cfg.local_lr,
                          _round_seed(client.seed, r), cfg.batch_size, cfg.optimizer)
    acc = evaluate(sub_spec, trained, client.test)["accuracy"] if client.test is not None else None
    return trained, client.sample_count, acc


def select_clients(cfg: ExperimentConfig, clients: list[ClientProfile], r: int) -> list[ClientProfile]:
    if cfg.participation >= 1:
        return list(clients)
    k = max(1, int(round(cfg.participation * len(clients))))
    rng = np.random.default_rng(_round_seed(cfg.sub_seed("partition"), r))
    chosen = np.sort(rng.choice(len(clients), size=k, replace=False))
    return [clients[i] for i in chosen]


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def run_round(env: Environment, state: FederationState) -> tuple[FederationState, dict]:
    """One full round; returns the updated state and its report."""
    cfg = env.cfg
    r = state.round + 1
    start = time.perf_counter()
    opts = pipeline_options(cfg)
    sched = schedule(cfg)
    tseed = cfg.sub_seed("training")
    participants = select_clients(cfg, state.clients, r)

    # compression, one pipeline per device type
    sub_models = {}
    for sr in sorted({c.sr for c in participants}):
        plan = env.plans[sr]
        cp = state.conv_params[sr]
        if not cfg.identity_pipelines and cfg.conv_epochs > 0:
            cp = _step("compression fine-tuning", comp.finetune_compression, state.global_params, plan, cp,
                       env.server_train, cfg.conv_epochs, opts, sched, _round_seed(tseed, r, 2, int(sr * 1000)),
                       cfg.batch_size, cfg.optimizer)
            state.conv_params[sr] = cp
        sub_models[sr] = _step("compression", comp.compress_model, state.global_params, plan, cp, opts)

    # clients
    uploads = []
    for client in participants:
        params, s_j, acc = _step(f"local training (client {client.client_id})", client_update, client,
                                 env.plans[client.sr].sub_spec, sub_models[client.sr], cfg, r)
        uploads.append((client.client_id, client.sr, params, s_j, acc))

    # dilation, fresh TC parameters per client per round
    dilated = []
    for cid, sr, params, _, _ in uploads:
        tc_plan = dil.derive_tc_plan(env.plans[sr])
        if cfg.identity_pipelines:
            tp = dil.identity_tc_params(tc_plan)
        else:
            tp = dil.init_tc_params(tc_plan, np.random.default_rng(_round_seed(tseed, r, 3, cid)), opts)
            if cfg.tc_epochs > 0:
                tp = _step(f"dilation fine-tuning (client {cid})", dil.finetune_dilation, params, tc_plan, tp,
                           env.server_train, cfg.tc_epochs, opts, sched, _round_seed(tseed, r, 4, cid),
                           cfg.batch_size, cfg.optimizer)
        dilated.append(_step(f"dilation (client {cid})", dil.dilate_model, params, tc_plan, tp, opts))

    # aggregation
    counts = [u[3] for u in uploads]
    if cfg.aggregation == "weighted" and cfg.agg_epochs > 0 and not cfg.identity_pipelines:
        v = _step("weight tuning", agg.tune_weight_vectors, env.spec, dilated, counts, state.global_params,
                  env.server_train, cfg.lam, cfg.agg_epochs, cfg.agg_lr, _round_seed(tseed, r, 5),
                  cfg.batch_size, cfg.agg_optimizer, cfg.kld_bins)
    else:
        v = np.ones((len(dilated), len(env.spec.layers)))
    state.global_params = _step("aggregation", agg.weighted_aggregate, env.spec, dilated, v, counts)
    state.round = r
    state.last_uploads = {u[0]: u[2] for u in uploads}

    metrics = evaluate(env.spec, state.global_params, env.server_test)
    client_acc = {str(u[0]): u[4] for u in uploads}
    report = {
        "round": r,
        "global_accuracy": metrics["accuracy"],
        "global_loss": metrics["loss"],
        "mean_client_accuracy": _mean(client_acc.values()),
        "client_accuracy": client_acc,
        "weight_vectors": v.tolist(),
        "seconds": time.perf_counter() - start,
    }
    return state, report


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def deterministic_view(report: dict) -> dict:
    """The report without wall-clock fields (what goes into ``report.json``)."""
    return {k: v for k, v in report.items() if k != "seconds"}


def write_checkpoint(out_dir, state: FederationState, report: dict | None) -> Path:
    d = Path(out_dir) / f"round_{state.round}"
    d.mkdir(parents=True, exist_ok=True)
    save(d / "global.fcps", state.global_params)
    for cid, params in state.last_uploads.items():
        save(d / f"client_{cid}.fcps", params)
    if report is not None:
        (d / "report.json").write_text(json.dumps(deterministic_view(report), sort_keys=True))
        (d / "timing.json").write_text(json.dumps({"seconds": report["seconds"]}))
    return d


def run_experiment(cfg: ExperimentConfig, out_dir=None, data: Dataset | None = None, rounds: int | None = None,
                   progress=None) -> list[dict]:
    """Run ``cfg.rounds`` rounds (or ``rounds``), checkpointing every round when ``out_dir`` is given."""
    env, state = setup(cfg, data)
    if cfg.pretrain:
        state = pretrain_global(env, state, cfg.pretrain_epochs)
    if out_dir is not None:
        write_checkpoint(out_dir, state, None)
    reports = []
    for _ in range(cfg.rounds if rounds is None else rounds):
        state, report = run_round(env, state)
        reports.append(report)
        if out_dir is not None:
            write_checkpoint(out_dir, state, report)
        if progress is not None:
            progress(report)
    return reports


def partition_stats(cfg: ExperimentConfig, data: Dataset | None = None) -> list[dict]:
    """Per-client SR, sample count and class histogram."""
    _, state = setup(cfg, data)
    return [{"client": c.client_id, "sr": c.sr, "samples": c.sample_count,
             "classes": c.train.class_counts().tolist()} for c in state.clients]
