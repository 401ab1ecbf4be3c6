"""Scenario orchestration, best-round summaries and the metrics CSV."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .config import ScenarioConfig
from .data import (
    GarchParams,
    PriceSeries,
    SampleSet,
    generate_synthetic,
    load_price_csv,
    partition_iid,
    partition_quarters,
    prepare_market,
    subsample_fraction,
    union,
)
from .federation import (
    MetricsRecord,
    RoundHistory,
    personalize_last_layer,
    run_centralized,
    run_fedavg,
    run_local,
    train_scratch,
)
from .model import save_checkpoint

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "scheme", "client", "bce", "accuracy")

LABELS = {
    "local": "Local (Mean)",
    "fedavg": "Federated (FedAvg)",
    "fedavg_dp": "Federated (FedAvg)",
    "centralized": "Centralized (Global)",
    "transfer_lastlayer": "Federated + (Last layer)",
    "transfer_scratch": "Scratch",
}

SCHEME_SETS = {
    "iid": ("local", "fedavg", "centralized"),
    "quarters": ("local", "fedavg", "centralized"),
    "hetero": ("local", "fedavg", "centralized"),
    "dp": ("local", "fedavg_dp", "centralized"),
    "transfer": ("local", "fedavg", "centralized", "transfer_lastlayer", "transfer_scratch"),
    "centralized": ("centralized",),
    "local": ("local",),
}

# alpha/beta offsets of the synthetic markets used by the transfer scenario
_TRANSFER_VARIANTS = (("SYN_A", 0.0, 0.0), ("SYN_B", 0.02, -0.03), ("SYN_C", -0.01, 0.01))


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def _synthetic(cfg: ScenarioConfig, market_id="SYN", seed_offset=0, d_alpha=0.0, d_beta=0.0):
    params = GarchParams(cfg.synth_omega, cfg.synth_alpha + d_alpha, cfg.synth_beta + d_beta)
    return generate_synthetic(cfg.synth_days, params, cfg.synth_seasonal_amp, cfg.synth_start,
                              seed=cfg.data_seed + seed_offset, market_id=market_id)


def _load(cfg: ScenarioConfig, market_id, path) -> PriceSeries:
    if cfg.base_dir and not os.path.isabs(path):
        path = os.path.join(cfg.base_dir, path)
    with open(path, "rb") as fh:
        return load_price_csv(fh.read(), market_id)


def load_markets(cfg: ScenarioConfig):
    """Training markets and (for ``transfer``) the target market."""
    if cfg.synthetic:
        if cfg.scenario != "transfer":
            return [_synthetic(cfg)], None
        series = [_synthetic(cfg, mid, i, da, db) for i, (mid, da, db) in enumerate(_TRANSFER_VARIANTS)]
        return series[:2], series[2]
    train = [_load(cfg, mid, path) for mid, path in cfg.data]
    target = None
    if cfg.target is not None and cfg.target != "synthetic":
        target = _load(cfg, *cfg.target)
    elif cfg.target == "synthetic":
        mid, da, db = _TRANSFER_VARIANTS[2]
        target = _synthetic(cfg, mid, 2, da, db)
    return train, target


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------

@dataclass
class SummaryRow:
    scheme: str
    label: str
    bce: float
    accuracy: float
    best_round: float  # mean over clients for the local row


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    history: RoundHistory
    summary: list
    final_params: object = None


def _best(history: RoundHistory, scheme: str, client: int):
    train = history.select(scheme, client, train=True)
    test = history.select(scheme, client)
    i = min(range(len(train)), key=lambda j: (train[j].bce, j))
    return test[i]


def summarize(history: RoundHistory, schemes) -> list:
    """One row per scheme at its best round (lowest training BCE); local clients
    are each taken at their own best round and then averaged."""
    rows = []
    for scheme in schemes:
        clients = sorted({r.client for r in history.select(scheme)})
        if not clients:
            continue
        best = [_best(history, scheme, c) for c in clients]
        rows.append(SummaryRow(
            scheme, LABELS[scheme],
            float(np.mean([b.bce for b in best])),
            float(np.mean([b.accuracy for b in best])),
            float(np.mean([b.round for b in best])),
        ))
    return rows


def format_summary(rows, title="") -> str:
    out = io.StringIO()
    if title:
        out.write(title + "\n")
    out.write(f"{'Training Scheme':<28}{'BCE':>10}{'Accuracy':>10}{'Best':>8}\n")
    for r in rows:
        out.write(f"{r.label:<28}{r.bce:>10.4f}{r.accuracy:>10.4f}{r.best_round:>8.1f}\n")
    return out.getvalue()


def run_scenario(cfg: ScenarioConfig, write: bool = True) -> ScenarioResult:
    markets, target = load_markets(cfg)
    fc = cfg.features()
    mcfg = cfg.model()
    rcfg = cfg.rounds_config()
    prepared = [prepare_market(p, fc) for p in markets]
    history = RoundHistory()
    final = None

    if cfg.scenario == "transfer":
        trains = [tr for tr, _ in prepared]
        test = union([te for _, te in prepared])
        fed = run_fedavg(mcfg, rcfg, trains, test)
        final = fed.final_params
        history.extend(fed)
        history.extend(run_centralized(mcfg, rcfg, union(trains), test))
        t_train, t_test = prepare_market(target, fc)
        small = subsample_fraction(t_train, cfg.transfer_fraction, cfg.seed)
        scratch_epochs = cfg.finetune_epochs if cfg.scratch_epochs is None else cfg.scratch_epochs
        personalize_last_layer(mcfg, final, small, cfg.finetune_epochs, rcfg, cfg.seed, t_test, history)
        train_scratch(mcfg, small, scratch_epochs, rcfg, cfg.seed, t_test, history)
    else:
        train, test = prepared[0]
        if cfg.scenario in ("iid", "hetero", "dp", "local"):
            parts = partition_iid(train, cfg.n_clients, cfg.seed)
        elif cfg.scenario == "quarters":
            parts = partition_quarters(train)
            for p in parts:
                if len(p) == 0:
                    history.events.append(f"quarter {p.client_id} has no training samples")
        else:
            parts = None

        if cfg.scenario == "local":
            history.extend(run_local(mcfg, rcfg, parts, test))
        elif cfg.scenario == "centralized":
            cen = run_centralized(mcfg, rcfg, train, test)
            final = cen.final_params
            history.extend(cen)
        else:
            fed = run_fedavg(mcfg, rcfg, parts, test)
            final = fed.final_params
            history.extend(fed)
            history.extend(run_centralized(mcfg, rcfg, union(parts), test))

    for e in history.events:
        log.info(e)
    summary = summarize(history, SCHEME_SETS[cfg.scenario])
    result = ScenarioResult(cfg, history, summary, final)
    if write:
        write_outputs(result)
    return result


def _resolve(cfg, path):
    if cfg.base_dir and not os.path.isabs(path):
        return os.path.join(cfg.base_dir, path)
    return path


def train_metrics_path(path: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}.train{ext or '.csv'}"


def write_outputs(result: ScenarioResult):
    cfg = result.config
    out = _resolve(cfg, cfg.output)
    emit_metrics_csv(result.history.records, out)
    emit_metrics_csv(result.history.train_records, train_metrics_path(out))
    if cfg.checkpoint and result.final_params is not None:
        save_checkpoint(_resolve(cfg, cfg.checkpoint), cfg.model(), result.final_params)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def metrics_csv_text(records) -> str:
    records = getattr(records, "records", records)
    rows = sorted(records, key=lambda r: (r.round, r.scheme, r.client))
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for r in rows:
        buf.write(f"{r.round},{r.scheme},{r.client},{r.bce:.6f},{r.accuracy:.6f}\n")
    return buf.getvalue()


def emit_metrics_csv(records, path) -> None:
    """Header ``round,scheme,client,bce,accuracy``; 6-decimal floats; rows sorted by
    (round, scheme, client). Accepts a RoundHistory or a list of MetricsRecord."""
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv_text(records))


def read_metrics_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricsRecord(int(r[0]), r[1], int(r[2]), float(r[3]), float(r[4])) for r in reader]
