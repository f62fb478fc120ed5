"""Evaluation protocols over a trained federation.

The server only ever holds the global encoder, so a forecaster is always a
client's local decoder and heads sitting on top of the global encoder.
In-domain scores use client ``k``'s model on client ``k``'s held-out
windows; zero-shot and probabilistic scores average over every client's
model on the unseen-domain windows.
"""

from __future__ import annotations

import copy
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .data import FederationDataset
from .diffusion import NoiseSchedule
from .model import forecast_batch


@dataclass
class MetricsReport:
    protocol: str
    horizons: list
    n_samples: int | None
    seed: int
    per_dataset: dict  # dataset -> {horizon(str) -> {metric -> value}}
    aggregate: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "horizons": self.horizons,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "per_dataset": self.per_dataset,
            "aggregate": self.aggregate,
            "meta": self.meta,
        }

    def rows(self):
        for ds, by_h in self.per_dataset.items():
            for h, by_m in by_h.items():
                for m, v in by_m.items():
                    yield (self.protocol, ds, int(h), m, v)
        for h, by_m in self.aggregate.items():
            for m, v in by_m.items():
                yield (self.protocol, "aggregate", int(h), m, v)


def _aggregate(per_dataset: dict) -> dict:
    out = {}
    datasets = list(per_dataset.values())
    for h in datasets[0]:
        out[h] = {
            m: float(np.mean([d[h][m] for d in datasets])) for m in datasets[0][h]
        }
    return out


def _season(window, default: int) -> int:
    """Generator period if known, else ``default``; 1 when the context is too short."""
    s = window.period or default
    return s if s < len(window.context) else 1


def _point_scores(models, windows, horizons, schedule, seed, default_season):
    """Mean over models and windows of MSE/MAE/MASE per horizon."""
    H = max(horizons)
    contexts = [w.context for w in windows]
    acc = {h: {"mse": [], "mae": [], "mase": []} for h in horizons}
    for mi, model in enumerate(models):
        rng = np.random.default_rng([seed, mi])
        paths = forecast_batch(model, contexts, H, schedule, rng, mode="point")
        for w, path in zip(windows, paths):
            season = _season(w, default_season)
            for h in horizons:
                y, yhat = w.target[:h], path[:h]
                acc[h]["mse"].append(metrics.mse(y, yhat))
                acc[h]["mae"].append(metrics.mae(y, yhat))
                acc[h]["mase"].append(metrics.mase(y, yhat, w.context, season))
    return {str(h): {k: float(np.mean(v)) for k, v in acc[h].items()} for h in horizons}


def _prob_scores(models, windows, horizons, schedule, seed, default_season, m, feed_back):
    H = max(horizons)
    contexts = [w.context for w in windows]
    acc = {h: {"crps": [], "wql": [], "mase": [], "mse": [], "mae": []} for h in horizons}
    for mi, model in enumerate(models):
        rng = np.random.default_rng([seed, mi, 1])
        paths = forecast_batch(
            model, contexts, H, schedule, rng, mode="samples", n_samples=m, feed_back=feed_back
        )
        for w, samples in zip(windows, paths):
            season = _season(w, default_season)
            for h in horizons:
                y, s = w.target[:h], samples[:, :h]
                med = np.median(s, axis=0)
                acc[h]["crps"].append(metrics.crps_from_samples(s, y))
                acc[h]["wql"].append(metrics.weighted_quantile_loss(s, y))
                acc[h]["mase"].append(metrics.mase(y, med, w.context, season))
                acc[h]["mse"].append(metrics.mse(y, med))
                acc[h]["mae"].append(metrics.mae(y, med))
    return {str(h): {k: float(np.mean(v)) for k, v in acc[h].items()} for h in horizons}


def forecasting_models(clients, global_encoder):
    """Copies of each client's local model carrying the global encoder."""
    models = []
    for c in clients:
        mdl = copy.deepcopy(c.model)
        mdl.load_encoder_state(global_encoder)
        mdl.set_generator(None)
        models.append(mdl)
    return models


def evaluate(
    models,
    federation: FederationDataset,
    protocol: str,
    schedule: NoiseSchedule,
    horizons=(8, 16, 32),
    seed: int = 1234,
    n_samples: int = 20,
    mase_season: int = 24,
    feed_back: str = "mean",
) -> MetricsReport:
    """Score ``models`` (one per client, in client order) under ``protocol``."""
    horizons = sorted(int(h) for h in horizons)
    eval_ids = federation.eval_ids()
    if eval_ids & federation.train_ids():
        raise RuntimeError("evaluation windows overlap the training windows")
    F = min(
        [len(w.target) for ws in federation.held_out.values() for w in ws]
        + [len(w.target) for w in federation.unseen]
        or [0]
    )
    if horizons[-1] > F:
        raise ValueError(f"horizon {horizons[-1]} exceeds available target length {F}")
    per = {}
    if protocol == "in_domain":
        for c, model in zip(federation.clients, models):
            ws = federation.held_out.get(c.client_id, ())
            if not ws:
                raise ValueError(f"client {c.client_id} has an empty held-out split")
            per[f"client_{c.client_id}"] = _point_scores(
                [model], ws, horizons, schedule, seed + c.client_id, mase_season
            )
    elif protocol == "zero_shot":
        if not federation.unseen:
            raise ValueError("unseen-domain split is empty")
        per["unseen"] = _point_scores(models, federation.unseen, horizons, schedule, seed, mase_season)
    elif protocol == "probabilistic":
        if not federation.unseen:
            raise ValueError("unseen-domain split is empty")
        per["unseen"] = _prob_scores(
            models, federation.unseen, horizons, schedule, seed, mase_season, n_samples, feed_back
        )
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return MetricsReport(
        protocol=protocol,
        horizons=horizons,
        n_samples=n_samples if protocol == "probabilistic" else None,
        seed=seed,
        per_dataset=per,
        aggregate=_aggregate(per),
    )


def reports_to_json(reports, extra: dict | None = None) -> str:
    body = {"reports": [r.to_dict() for r in reports]}
    body.update(extra or {})
    return json.dumps(body, indent=2, sort_keys=True)


def reports_to_csv(reports, config_hash: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_hash", "protocol", "dataset", "horizon", "metric", "value"])
    for r in reports:
        for row in r.rows():
            w.writerow([config_hash, *row[:4], repr(float(row[4]))])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_ablation(config, variant: str):
    """Train and evaluate ``config`` under one ablation variant.

    ``no_grl`` zeroes the adversarial weight and GRL coefficient, ``no_proto``
    the alignment weight, ``no_dag`` swaps DaG for FedAvg weights.
    """
    import dataclasses

    from .experiment import Experiment

    exp = Experiment(dataclasses.replace(config, variant=variant))
    exp.run()
    return exp.evaluate_all()


def write_reports(reports, out_dir, config_hash, extra=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(reports_to_json(reports, {"config_hash": config_hash, **(extra or {})}))
    (out / "metrics.csv").write_text(reports_to_csv(reports, config_hash))
