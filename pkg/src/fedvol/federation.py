"""FedAvg rounds, local-only and centralized baselines, and last-layer personalization.

Seeding: every epoch of every client draws its shuffle from
``SeedSequence([base_seed, client_id, round, epoch])``. The centralized
baseline uses client id 0 with ``round = epoch // E + 1``, so a one-client
federation and the centralized run consume identical random streams.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import consensus
from .data import Partition, SampleSet, Standardizer, union
from .errors import ParameterError, SizeError, ValidationError, VerificationError
from .model import AdamState, Layout, ModelConfig, evaluate, init_params, train_epoch
from .privacy import DpConfig, dp_process

log = logging.getLogger(__name__)

_INIT_TAG = 0x494E4954


@dataclass(frozen=True)
class RoundConfig:
    n_clients: int = 3
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 32
    base_seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hetero: bool = False
    hetero_mode: str = "round"  # or "epoch"
    dp: Optional[DpConfig] = None
    reset_optimizer: bool = False
    local_baseline: bool = True
    check_consensus: bool = False

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 1 or self.local_epochs < 1:
            raise ParameterError("n_clients, rounds and local_epochs must all be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.hetero_mode not in ("round", "epoch"):
            raise ParameterError(f"unknown hetero_mode {self.hetero_mode!r}")

    def fresh_optimizer(self, n: int) -> AdamState:
        return AdamState.zeros(n, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


def derive_seed(base_seed: int, client_id: int, round_: int, epoch: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, client_id, round_, epoch])


def init_seed(base_seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, _INIT_TAG])


# --------------------------------------------------------------------------
# history
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRecord:
    round: int
    scheme: str
    client: int
    bce: float
    accuracy: float


@dataclass
class RoundHistory:
    """Test-set records plus the matching training-set records used for best-round selection."""

    records: list = field(default_factory=list)
    train_records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final_params: Optional[np.ndarray] = None
    scaler: Optional[Standardizer] = None

    def log(self, round_, scheme, client, test_metrics, train_metrics=None):
        self.records.append(MetricsRecord(round_, scheme, client, test_metrics.bce, test_metrics.accuracy))
        if train_metrics is not None:
            self.train_records.append(
                MetricsRecord(round_, scheme, client, train_metrics.bce, train_metrics.accuracy)
            )

    def extend(self, other: "RoundHistory") -> "RoundHistory":
        self.records.extend(other.records)
        self.train_records.extend(other.train_records)
        self.events.extend(other.events)
        return self

    def select(self, scheme, client=None, train=False):
        src = self.train_records if train else self.records
        return [r for r in src if r.scheme == scheme and (client is None or r.client == client)]

    def schemes(self):
        return sorted({r.scheme for r in self.records})


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    partition: SampleSet  # already standardized for training
    params: np.ndarray
    opt: AdamState
    rng_seed: int

    @property
    def empty(self):
        return len(self.partition) == 0


def hetero_participates(client_id: int, round_: int) -> bool:
    """1-indexed client k updates on rounds divisible by k."""
    if client_id < 1 or round_ < 1:
        raise ParameterError("client ids and rounds are 1-indexed")
    return round_ % client_id == 0


def _epochs_to_run(rcfg: RoundConfig, client_id: int, round_: int) -> list:
    E = rcfg.local_epochs
    if not rcfg.hetero:
        return list(range(E))
    k = client_id + 1
    if rcfg.hetero_mode == "round":
        return list(range(E)) if hetero_participates(k, round_) else []
    return [e for e in range(E) if hetero_participates(k, (round_ - 1) * E + e + 1)]


def local_update(cfg: ModelConfig, client: ClientState, global_params: np.ndarray,
                 epochs, rcfg: RoundConfig, round_: int) -> np.ndarray:
    """Copy the global model and run the given local epochs on the client's data.

    ``epochs`` is an epoch count or an explicit list of epoch indices. The
    client's Adam state is carried across rounds unless ``reset_optimizer``.
    """
    if client.empty:
        raise SizeError(f"client {client.client_id} has no data")
    epoch_ids = list(range(epochs)) if isinstance(epochs, int) else list(epochs)
    params = global_params.copy()
    opt = rcfg.fresh_optimizer(len(params)) if rcfg.reset_optimizer else client.opt
    for e in epoch_ids:
        params, opt = train_epoch(
            cfg, params, opt, client.partition, rcfg.batch_size,
            derive_seed(client.rng_seed, client.client_id, round_, e),
        )
    client.opt = opt
    client.params = params
    return params


def aggregate(updates) -> np.ndarray:
    """Unweighted coordinate-wise mean.

    Each coordinate is summed in ascending value order, which makes the
    result bitwise independent of the order the updates arrive in.
    """
    updates = list(updates)
    if not updates:
        raise SizeError("nothing to aggregate")
    shape = np.shape(updates[0])
    if any(np.shape(u) != shape for u in updates):
        raise ValidationError("all updates must have the same length")
    if len(updates) == 1:
        return np.array(updates[0], dtype=np.float64)
    rows = np.sort(np.vstack(updates), axis=0)
    total = rows[0].copy()
    for r in rows[1:]:
        total += r
    return total / len(updates)


# --------------------------------------------------------------------------
# FedAvg
# --------------------------------------------------------------------------

@dataclass
class FedState:
    cfg: ModelConfig
    rcfg: RoundConfig
    global_params: np.ndarray
    clients: list
    history: RoundHistory = field(default_factory=RoundHistory)


def make_clients(cfg: ModelConfig, rcfg: RoundConfig, partitions, scaler: Standardizer,
                 global_params: np.ndarray) -> list:
    clients = []
    for k, part in enumerate(partitions):
        data = getattr(part, "samples", part)
        data = scaler.transform(data.sorted()) if len(data) else data
        clients.append(ClientState(k, data, global_params.copy(),
                                   rcfg.fresh_optimizer(len(global_params)), rcfg.base_seed))
    return clients


def run_round(state: FedState, round_: int) -> list:
    """One synchronous FedAvg round; mutates ``state`` and returns the aggregated vectors."""
    rcfg = state.rcfg
    g = state.global_params
    updates = []
    trained = 0
    for client in state.clients:
        epochs = _epochs_to_run(rcfg, client.client_id, round_)
        if client.empty:
            state.history.events.append(f"round {round_}: client {client.client_id} empty, contributes global")
            updates.append(g)
            continue
        if not epochs:
            updates.append(g)
            continue
        w = local_update(state.cfg, client, g, epochs, rcfg, round_)
        if rcfg.dp is not None:
            w = dp_process(g, w, rcfg.dp, round_, client.client_id)
        updates.append(w)
        trained += 1
    if trained == 0:
        state.history.events.append(f"round {round_}: no client trained, global unchanged")
    new_global = aggregate(updates)
    if rcfg.check_consensus:
        mixed = consensus.consensus_apply(consensus.uniform_matrix(len(updates)), consensus.stack(updates))
        err = float(np.max(np.abs(mixed - new_global)))
        if err > consensus.ALGEBRAIC_TOL:
            raise VerificationError("fedavg-consensus equivalence", f"max deviation {err:.3e}")
    state.global_params = new_global
    for client in state.clients:
        client.params = new_global
    return updates


def _check_partitions(partitions, rcfg: RoundConfig):
    if len(partitions) != rcfg.n_clients:
        raise ValidationError(f"{len(partitions)} partitions for {rcfg.n_clients} clients")
    if all(len(getattr(p, "samples", p)) == 0 for p in partitions):
        raise SizeError("every partition is empty")


def run_fedavg(cfg: ModelConfig, rcfg: RoundConfig, partitions, test: SampleSet,
               scheme: Optional[str] = None) -> RoundHistory:
    """T rounds of FedAvg, evaluated after every round on ``test``.

    Training loss is measured on the pooled client data. When
    ``rcfg.local_baseline`` is set, isolated per-client models are trained
    with the same partitions, seeds and schedule and recorded as ``local``.
    """
    _check_partitions(partitions, rcfg)
    scheme = scheme or ("fedavg_dp" if rcfg.dp is not None else "fedavg")
    pooled = union(partitions)
    scaler = Standardizer.fit(pooled)
    pooled_s, test_s = scaler.transform(pooled), scaler.transform(test)

    w0 = init_params(cfg, init_seed(rcfg.base_seed))
    state = FedState(cfg, rcfg, w0, make_clients(cfg, rcfg, partitions, scaler, w0))
    for t in range(1, rcfg.rounds + 1):
        run_round(state, t)
        state.history.log(t, scheme, -1, evaluate(cfg, state.global_params, test_s),
                          evaluate(cfg, state.global_params, pooled_s))
        if not np.all(np.isfinite(state.global_params)):
            state.history.events.append(f"round {t}: non-finite global parameters")
    history = state.history
    history.final_params = state.global_params
    history.scaler = scaler
    if rcfg.local_baseline:
        history.extend(run_local(cfg, rcfg, partitions, test))
    return history


def run_local(cfg: ModelConfig, rcfg: RoundConfig, partitions, test: SampleSet) -> RoundHistory:
    """Isolated per-client training: same seeds and schedule as FedAvg, never aggregated."""
    history = RoundHistory()
    w0 = init_params(cfg, init_seed(rcfg.base_seed))
    for k, part in enumerate(partitions):
        data = getattr(part, "samples", part)
        if len(data) == 0:
            history.events.append(f"local client {k}: empty partition, skipped")
            continue
        scaler = Standardizer.fit(data)
        train_s = scaler.transform(data.sorted())
        test_s = scaler.transform(test)
        client = ClientState(k, train_s, w0.copy(), rcfg.fresh_optimizer(len(w0)), rcfg.base_seed)
        params = w0
        for t in range(1, rcfg.rounds + 1):
            epochs = _epochs_to_run(rcfg, k, t)
            if epochs:
                params = local_update(cfg, client, params, epochs, rcfg, t)
            history.log(t, "local", k, evaluate(cfg, params, test_s), evaluate(cfg, params, train_s))
    return history


def run_centralized(cfg: ModelConfig, rcfg: RoundConfig, train: SampleSet, test: SampleSet,
                    scheme: str = "centralized") -> RoundHistory:
    """One model on the pooled training set for T*E epochs, evaluated after each epoch."""
    train = union([train])
    scaler = Standardizer.fit(train)
    train_s, test_s = scaler.transform(train), scaler.transform(test)
    params = init_params(cfg, init_seed(rcfg.base_seed))
    opt = rcfg.fresh_optimizer(len(params))
    history = RoundHistory()
    E = rcfg.local_epochs
    for j in range(rcfg.rounds * E):
        params, opt = train_epoch(cfg, params, opt, train_s, rcfg.batch_size,
                                  derive_seed(rcfg.base_seed, 0, j // E + 1, j % E))
        history.log(j + 1, scheme, -1, evaluate(cfg, params, test_s), evaluate(cfg, params, train_s))
    history.final_params = params
    history.scaler = scaler
    return history


# --------------------------------------------------------------------------
# personalization
# --------------------------------------------------------------------------

def _fit(cfg, params, train_s, epochs, rcfg, seed, trainable, scheme, test_s, history):
    n = len(params) if trainable is None else trainable.stop - trainable.start
    opt = rcfg.fresh_optimizer(n)
    for e in range(1, epochs + 1):
        params, opt = train_epoch(cfg, params, opt, train_s, rcfg.batch_size,
                                  derive_seed(seed, 0, e, 0), trainable=trainable)
        if history is not None and test_s is not None:
            history.log(e, scheme, -1, evaluate(cfg, params, test_s), evaluate(cfg, params, train_s))
    return params


def personalize_last_layer(cfg: ModelConfig, global_params: np.ndarray, new_train: SampleSet,
                           epochs: int, rcfg: RoundConfig = RoundConfig(), seed: int = 0,
                           test: Optional[SampleSet] = None,
                           history: Optional[RoundHistory] = None) -> np.ndarray:
    """Retrain only the dense head (v, c); every LSTM coordinate stays bit-identical.

    Inputs are standardized on ``new_train``. When ``test`` and ``history``
    are given, per-epoch metrics are appended as ``transfer_lastlayer``.
    """
    if epochs < 0:
        raise ParameterError("epochs must be >= 0")
    if epochs == 0:
        return global_params.copy()
    scaler = Standardizer.fit(new_train)
    train_s = scaler.transform(new_train)
    test_s = scaler.transform(test) if test is not None else None
    return _fit(cfg, global_params.copy(), train_s, epochs, rcfg, seed, Layout(cfg).head,
                "transfer_lastlayer", test_s, history)


def train_scratch(cfg: ModelConfig, new_train: SampleSet, epochs: int,
                  rcfg: RoundConfig = RoundConfig(), seed: int = 0,
                  test: Optional[SampleSet] = None,
                  history: Optional[RoundHistory] = None) -> np.ndarray:
    """Fresh initialization, full-model training on the small target set."""
    if epochs < 0:
        raise ParameterError("epochs must be >= 0")
    params = init_params(cfg, init_seed(seed))
    if epochs == 0:
        return params
    scaler = Standardizer.fit(new_train)
    train_s = scaler.transform(new_train)
    test_s = scaler.transform(test) if test is not None else None
    return _fit(cfg, params, train_s, epochs, rcfg, seed, None, "transfer_scratch", test_s, history)
