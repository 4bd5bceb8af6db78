"""Federated round engine.

Simulated in-process clients: per-round client selection, local SGD updates
(plain or proximal-regularized), aggregation (sample-weighted averaging or
normalized averaging), and the imbalance-tracking round workflow that wires
the composition estimator and ratio observer into the loop:

    select -> broadcast model + balanced loss -> collect updates
    -> candidate aggregate -> probe previous model -> estimate counts
    -> mismatch check (maybe drop the aggregate) -> observer update
    -> rebuild loss weights for the next round -> record metrics

Clients run in ascending id order and every random stream is derived from
the master seed, so runs are fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .data import (
    AuxiliarySet,
    ClientDataset,
    Dataset,
    TrainingSlice,
    auxiliary_from_dataset,
    gen_synthetic,
    load_idx,
    make_synthetic_spec,
    sample_auxiliary,
    shard_partition,
    window_latest,
)
from .estimator import (
    EstimatorParams,
    counts_to_ratio,
    estimate_counts,
    oracle_counts,
    probe_auxiliary,
)
from .metrics import evaluate
from .nn import Array, LossSpec, MlpModel, OptState, backward, compute_loss, forward, mlp_init, sgd_step
from .observer import balanced_weights, cosine_similarity, mismatch_check, observer_init, observer_update

if TYPE_CHECKING:
    from .config import ExperimentConfig

STRATEGIES = ("fedavg", "fedprox", "fednova")
ALGORITHMS = ("baseline", "fedimt")

# Stream tags keeping independent rng lineages under one master seed.
_STREAM_MODEL = 11
_STREAM_TRAIN_DATA = 12
_STREAM_TEST_DATA = 13
_STREAM_MEANS = 14
_STREAM_PARTITION = 15
_STREAM_AUX = 16
_STREAM_SELECT = 17
_STREAM_CLIENT = 18


def derive_seed(seed, *tags: int) -> tuple[int, ...]:
    """Flat integer tuple usable as a numpy SeedSequence entropy."""
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    return base + tags


@dataclass
class FlConfig:
    num_clients: int
    rounds: int
    selection_rate: float = 0.3
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.001
    momentum: float = 0.9
    strategy: str = "fedavg"
    prox_mu: float = 0.0
    algorithm: str = "fedimt"
    n_latest: int | None = None
    drop_threshold: float = 0.5
    beta: float = 0.999
    baseline_loss: str = "plain_ce"  # loss for algorithm=baseline: plain_ce | focal
    focal_gamma: float = 2.0

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0.0 < self.selection_rate <= 1.0:
            raise ValueError("selection_rate must be in (0, 1]")
        if int(round(self.selection_rate * self.num_clients)) < 1:
            raise ValueError("selection_rate * num_clients rounds to zero clients")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.prox_mu < 0.0:
            raise ValueError("prox_mu must be >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.n_latest is not None and self.n_latest < 1:
            raise ValueError("n_latest must be >= 1 when set")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must be in [0, 1)")
        if self.baseline_loss not in ("plain_ce", "focal"):
            raise ValueError(f"baseline_loss must be plain_ce or focal, got {self.baseline_loss!r}")
        if self.focal_gamma < 0.0:
            raise ValueError("focal_gamma must be >= 0")


@dataclass
class ClientUpdate:
    """What a client sends back: weights, its disclosed sample count, and the
    number of local steps taken. train_loss is simulation-side telemetry; the
    aggregation and estimation APIs never read it."""

    client_id: int
    model: MlpModel
    sample_count: int
    local_steps: int
    train_loss: float


@dataclass
class RoundRecord:
    index: int
    selected_clients: list[int]
    estimated_counts: Array | None
    round_ratio: Array | None
    observer_ratio: Array | None
    t_round: float | None
    t_global: float | None
    dropped: bool | None
    drop_similarity: float | None
    accuracy: float | None
    minority_accuracy: float | None
    train_loss: float | None


@dataclass
class ExperimentReport:
    seed: int
    num_classes: int
    config: dict
    records: list[RoundRecord]
    summary: dict


def select_clients(num_clients: int, rate: float, round_index: int, seed) -> list[int]:
    """Uniform without-replacement sample of round(rate * num_clients) ids,
    deterministic per (seed, round), returned in ascending order."""
    k = int(round(rate * num_clients))
    if k < 1:
        raise ValueError("selection would pick zero clients")
    rng = np.random.default_rng(derive_seed(seed, _STREAM_SELECT, round_index))
    return sorted(int(c) for c in rng.choice(num_clients, size=k, replace=False))


def local_update(
    client_id: int,
    features: Array,
    labels: Array,
    global_model: MlpModel,
    config: FlConfig,
    loss_spec: LossSpec,
    seed,
) -> ClientUpdate | None:
    """E epochs of mini-batch SGD from the broadcast weights.

    The final partial batch is kept. fedprox adds prox_mu * (w - w_global)
    to each weight gradient. Returns None for an empty slice (the caller
    reports and skips the client).
    """
    n = len(labels)
    if n == 0:
        return None
    model = global_model.copy()
    opt = OptState.for_model(model, lr=config.lr, momentum=config.momentum)
    rng = np.random.default_rng(seed)
    prox = config.strategy == "fedprox" and config.prox_mu > 0.0
    steps = 0
    loss_total = 0.0
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            acts = forward(model, features[batch])
            loss, grad_logits = compute_loss(acts, labels[batch], loss_spec)
            grads = backward(model, acts, grad_logits)
            if prox:
                for i in range(len(model.weights)):
                    grads.weight_grads[i] += config.prox_mu * (
                        model.weights[i] - global_model.weights[i]
                    )
            sgd_step(model, grads, opt)
            steps += 1
            loss_total += loss
    return ClientUpdate(
        client_id=client_id,
        model=model,
        sample_count=n,
        local_steps=steps,
        train_loss=loss_total / steps,
    )


def aggregate(updates: list[ClientUpdate], global_model: MlpModel, strategy: str) -> MlpModel:
    """Combine client updates into the next global model.

    fedavg/fedprox: weighted mean of client weights with p_k = n_k / sum(n).
    fednova: step-normalized deltas, w_g + tau_eff * sum(p_k * delta_k / steps_k)
    with tau_eff = sum(p_k * steps_k); identical to fedavg when all clients
    take the same number of local steps.
    """
    if not updates:
        raise ValueError("aggregate needs at least one update")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    updates = sorted(updates, key=lambda u: u.client_id)
    total = float(sum(u.sample_count for u in updates))
    p = [u.sample_count / total for u in updates]
    result = global_model.copy()
    n_layers = len(global_model.weights)

    if strategy in ("fedavg", "fedprox"):
        for i in range(n_layers):
            result.weights[i] = sum(pk * u.model.weights[i] for pk, u in zip(p, updates))
            result.biases[i] = sum(pk * u.model.biases[i] for pk, u in zip(p, updates))
        return result

    tau_eff = sum(pk * u.local_steps for pk, u in zip(p, updates))
    for i in range(n_layers):
        dw = sum(
            pk * (u.model.weights[i] - global_model.weights[i]) / u.local_steps
            for pk, u in zip(p, updates)
        )
        db = sum(
            pk * (u.model.biases[i] - global_model.biases[i]) / u.local_steps
            for pk, u in zip(p, updates)
        )
        result.weights[i] = global_model.weights[i] + tau_eff * dw
        result.biases[i] = global_model.biases[i] + tau_eff * db
    return result


@dataclass
class FederatedRunner:
    """Owns the mutable experiment state and advances it one round at a time."""

    config: FlConfig
    clients: list[ClientDataset]
    model: MlpModel
    seed: int | tuple
    aux: AuxiliarySet | None = None
    estimator_params: EstimatorParams = field(default_factory=EstimatorParams)
    test_features: Array | None = None
    test_labels: Array | None = None
    minority_classes: Array | None = None
    round_index: int = 0

    def __post_init__(self) -> None:
        self.config.validate()
        self.num_classes = self.model.num_classes
        self._tracking = self.config.algorithm == "fedimt" and self.num_classes >= 2
        if self._tracking:
            if self.aux is None:
                raise ValueError("fedimt needs an auxiliary set")
            self.observer = observer_init(
                self.num_classes,
                gain=self.config.selection_rate,
                drop_threshold=self.config.drop_threshold,
            )
            self._n_ref = float(max(self.num_classes, sum(c.total_count for c in self.clients)))
        else:
            self.observer = None
        self.loss_spec = self._build_loss_spec()

    def _build_loss_spec(self) -> LossSpec:
        if not self._tracking:
            return LossSpec(kind=self.config.baseline_loss, gamma=self.config.focal_gamma)
        ratio = self.observer.ratio
        per_class_n = np.maximum(1.0, np.rint(self._n_ref * ratio))
        return LossSpec(
            kind="class_balanced",
            beta=self.config.beta,
            per_class_n=per_class_n,
            class_weights=balanced_weights(ratio, self._n_ref, self.config.beta),
        )

    def _client_scope(self, client: ClientDataset, round_index: int) -> TrainingSlice:
        if self.config.n_latest is not None:
            return window_latest(client, self.config.n_latest, round_index)
        ds = client.dataset
        return TrainingSlice(features=ds.features, labels=ds.labels, indices=np.arange(len(ds)))

    def _estimate_round_ratio(self, candidate: MlpModel, total: float, num_selected: int):
        """Probe the previous global model and solve for this round's counts."""
        aux_grads = probe_auxiliary(
            self.model,
            self.aux,
            lr=self.config.lr,
            local_epochs=self.config.local_epochs,
            batch_size=self.config.batch_size,
            params=self.estimator_params,
        )
        estimate = estimate_counts(
            aux_grads,
            w_prev=self.model.weights[-1],
            w_new=candidate.weights[-1],
            total_samples=total,
            num_selected=num_selected,
            params=self.estimator_params,
        )
        return estimate.counts, counts_to_ratio(estimate.counts)

    def _evaluate(self) -> tuple[float | None, float | None]:
        if self.test_features is None:
            return None, None
        result = evaluate(self.model, self.test_features, self.test_labels, self.minority_classes)
        return result.accuracy, result.minority_accuracy

    def initial_record(self) -> RoundRecord:
        """Round-0 row: evaluation of the untrained model, nothing else."""
        acc, acc_m = self._evaluate()
        return RoundRecord(
            index=0,
            selected_clients=[],
            estimated_counts=None,
            round_ratio=None,
            observer_ratio=None,
            t_round=None,
            t_global=None,
            dropped=None,
            drop_similarity=None,
            accuracy=acc,
            minority_accuracy=acc_m,
            train_loss=None,
        )

    def run_round(self) -> RoundRecord:
        j = self.round_index
        selected = select_clients(
            self.config.num_clients, self.config.selection_rate, j, self.seed
        )
        updates: list[ClientUpdate] = []
        round_labels: list[Array] = []
        for cid in selected:
            scope = self._client_scope(self.clients[cid], j)
            update = local_update(
                cid,
                scope.features,
                scope.labels,
                self.model,
                self.config,
                self.loss_spec,
                derive_seed(self.seed, _STREAM_CLIENT, j, cid),
            )
            if update is None:
                continue
            updates.append(update)
            round_labels.append(scope.labels)

        estimated = round_ratio = observer_ratio = None
        t_round = t_global = drop_similarity = None
        dropped: bool | None = False
        train_loss = None

        if updates:
            candidate = aggregate(updates, self.model, self.config.strategy)
            train_loss = float(np.mean([u.train_loss for u in updates]))
            if self._tracking:
                if self.config.n_latest is not None:
                    total = float(self.config.n_latest * len(updates))
                else:
                    total = float(sum(u.sample_count for u in updates))
                estimated, round_ratio = self._estimate_round_ratio(
                    candidate, total, len(updates)
                )
                if self.observer.round_count >= 1:
                    decision = mismatch_check(self.observer, round_ratio)
                    dropped = decision.dropped
                    drop_similarity = decision.similarity
                self.observer = observer_update(self.observer, round_ratio)
                if not dropped:
                    self.model = candidate
                self._n_ref = max(float(self.num_classes), total)
                self.loss_spec = self._build_loss_spec()
            else:
                self.model = candidate

        if self._tracking:
            observer_ratio = self.observer.ratio.copy()
            if round_ratio is not None:
                truth = oracle_counts(round_labels, self.num_classes)
                if truth.sum() > 0:
                    t_round = cosine_similarity(round_ratio, counts_to_ratio(truth))
            global_labels = [
                self._client_scope(c, j).labels for c in self.clients
            ]
            global_truth = oracle_counts(global_labels, self.num_classes)
            if global_truth.sum() > 0:
                t_global = cosine_similarity(observer_ratio, counts_to_ratio(global_truth))

        acc, acc_m = self._evaluate()
        self.round_index += 1
        return RoundRecord(
            index=self.round_index,
            selected_clients=selected,
            estimated_counts=estimated,
            round_ratio=round_ratio,
            observer_ratio=observer_ratio,
            t_round=t_round,
            t_global=t_global,
            dropped=dropped,
            drop_similarity=drop_similarity,
            accuracy=acc,
            minority_accuracy=acc_m,
            train_loss=train_loss,
        )


def summarize_records(records: list[RoundRecord]) -> dict:
    def last_value(getter):
        for rec in reversed(records):
            value = getter(rec)
            if value is not None:
                return float(value)
        return None

    def mean_value(getter):
        values = [getter(r) for r in records if getter(r) is not None]
        return float(np.mean(values)) if values else None

    return {
        "final_acc": last_value(lambda r: r.accuracy),
        "final_acc_minority": last_value(lambda r: r.minority_accuracy),
        "mean_T_j": mean_value(lambda r: r.t_round),
        "mean_T_G": mean_value(lambda r: r.t_global),
        "drop_count": int(sum(1 for r in records if r.dropped)),
    }


def minority_classes_of(train_counts: Array) -> Array:
    """Classes whose training prevalence is strictly below the mean count."""
    counts = np.asarray(train_counts, dtype=float)
    return np.flatnonzero(counts < counts.mean())


def _build_datasets(config: "ExperimentConfig", seed) -> tuple[Dataset, Dataset]:
    if config.data_source == "idx":
        train = load_idx(config.idx_images, config.idx_labels)
        test = load_idx(config.idx_test_images, config.idx_test_labels)
        if test.num_classes < train.num_classes:
            test.num_classes = train.num_classes
        return train, test
    params = config.synthetic
    spec = make_synthetic_spec(
        params["classes"],
        params["feature_dim"],
        params["class_counts"],
        cluster_scale=params["cluster_scale"],
        class_separation=params["class_separation"],
        run_length=params["run_length"],
        seed=derive_seed(seed, _STREAM_MEANS),
    )
    train = gen_synthetic(spec, derive_seed(seed, _STREAM_TRAIN_DATA))
    test_counts = np.array(
        [
            int(round(c * config.test_fraction)) if c > 0 else 0
            for c in params["class_counts"]
        ]
    )
    test_counts = np.where(
        (np.asarray(params["class_counts"]) > 0) & (test_counts == 0), 1, test_counts
    )
    test_spec = make_synthetic_spec(
        params["classes"],
        params["feature_dim"],
        test_counts,
        cluster_scale=params["cluster_scale"],
        class_separation=params["class_separation"],
        run_length=params["run_length"],
        seed=derive_seed(seed, _STREAM_MEANS),
    )
    test = gen_synthetic(test_spec, derive_seed(seed, _STREAM_TEST_DATA))
    return train, test


def build_runner(config: "ExperimentConfig", seed) -> FederatedRunner:
    train, test = _build_datasets(config, seed)
    clients = shard_partition(
        train,
        config.fl.num_clients,
        config.shards_per_client,
        derive_seed(seed, _STREAM_PARTITION),
    )
    aux = None
    if config.fl.algorithm == "fedimt" and train.num_classes >= 2:
        if config.aux_idx_images is not None:
            aux = auxiliary_from_dataset(load_idx(config.aux_idx_images, config.aux_idx_labels))
        else:
            aux = sample_auxiliary(train, config.aux_per_class, derive_seed(seed, _STREAM_AUX))
    model = mlp_init(
        [train.features.shape[1], *config.hidden_sizes, train.num_classes],
        derive_seed(seed, _STREAM_MODEL),
    )
    return FederatedRunner(
        config=config.fl,
        clients=clients,
        model=model,
        seed=seed,
        aux=aux,
        estimator_params=config.estimator,
        test_features=None if config.skip_eval else test.features,
        test_labels=None if config.skip_eval else test.labels,
        minority_classes=minority_classes_of(train.class_counts()),
    )


def run_experiment(config: "ExperimentConfig", seed: int | None = None) -> ExperimentReport:
    """Run the configured number of rounds and return the full report.

    Fully deterministic per (config, seed); the report's round 0 is the
    initial evaluation before any training.
    """
    config.validate()
    master = config.seed if seed is None else seed
    runner = build_runner(config, master)
    records = [runner.initial_record()]
    for _ in range(config.fl.rounds):
        records.append(runner.run_round())
    return ExperimentReport(
        seed=int(master),
        num_classes=runner.num_classes,
        config=config.to_dict(),
        records=records,
        summary=summarize_records(records),
    )
