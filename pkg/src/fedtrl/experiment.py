"""Experiment orchestration: build a federation, run rounds, checkpoint,
evaluate and write run artifacts."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from . import __version__, checkpoint
from .client import finetune, make_client
from .config import ExperimentConfig, apply_variant, config_hash, config_to_dict
from .data import (
    ClientDataset,
    FederationDataset,
    TimeSeriesWindow,
    chronological_split,
    federation_manifest,
    generate_synthetic_federation,
    load_csv_dataset,
)
from .diffusion import build_noise_schedule
from .evaluation import evaluate, forecasting_models, write_reports
from .model import build_model
from .server import ServerState, initial_server_state, run_round

log = logging.getLogger(__name__)


def _renumber(windows, start):
    return tuple(
        TimeSeriesWindow(w.context, w.target, w.subdomain_label, w.norm_stats, start + i, w.period)
        for i, w in enumerate(windows)
    )


def build_federation(cfg: ExperimentConfig) -> FederationDataset:
    data = cfg.data
    if data.source == "synthetic":
        return generate_synthetic_federation(data.synthetic, cfg.seed)
    T, F = data.synthetic.T, data.synthetic.F
    clients, held, unseen = {}, {}, []
    next_id = 0
    for src in data.csv:
        ds = load_csv_dataset(src.path, src.column, T, F, data.stride, src.subdomain_label, src.client_id)
        if src.role == "unseen":
            unseen.extend(_renumber(ds.windows, next_id))
            next_id += ds.n_k
            continue
        n_train = int(round((1 - data.heldout_fraction) * ds.n_k))
        train, _, test = chronological_split(ds, (n_train / ds.n_k, 0.0, 1 - n_train / ds.n_k))
        train_w = _renumber(train.windows, next_id)
        next_id += len(train_w)
        test_w = _renumber(test.windows, next_id)
        next_id += len(test_w)
        prev = clients.get(src.client_id, ())
        clients[src.client_id] = prev + train_w
        held[src.client_id] = held.get(src.client_id, ()) + test_w
    cds = []
    for cid in sorted(clients):
        ws = clients[cid]
        cds.append(ClientDataset(cid, ws, max(w.subdomain_label for w in ws) + 1))
    return FederationDataset(tuple(cds), held, tuple(unseen), cfg.seed)


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


class Experiment:
    """One federated run. ``cfg`` is taken as written; the variant switches and
    derived defaults are applied to the copy stored in ``self.cfg`` while the
    hash is taken over the original, so all variants of a config share it."""

    def __init__(self, cfg: ExperimentConfig, federation: FederationDataset | None = None):
        self.hash = config_hash(cfg)
        cfg = apply_variant(cfg)
        cfg.train = cfg.train.resolved(cfg.rounds)
        self.cfg = cfg
        self.federation = federation if federation is not None else build_federation(cfg)
        self.schedule = build_noise_schedule(cfg.diffusion.steps, cfg.diffusion.kind)
        n_sub = max(c.subdomain_count for c in self.federation.clients)
        self.model_cfg = dataclasses.replace(cfg.model, n_subdomains=max(n_sub, cfg.model.n_subdomains))
        self.clients = [
            make_client(
                ds, self.model_cfg, cfg.train, self.schedule, cfg.seed, cfg.diffusion.per_patch_timesteps
            )
            for ds in self.federation.clients
        ]
        self.server = initial_server_state(build_model(self.model_cfg, cfg.seed))
        self.reports = []

    @property
    def round(self) -> int:
        return self.server.round

    def step(self):
        workers = self.cfg.workers or len(self.clients)
        self.server, report = run_round(
            self.server, self.clients, self.cfg.train, self.cfg.dag, self.cfg.seed, workers
        )
        self.reports.append(report)
        return report

    def run(self, rounds: int | None = None, on_round=None):
        target = self.cfg.rounds if rounds is None else self.round + rounds
        while self.round < target:
            report = self.step()
            if on_round is not None:
                on_round(self, report)
        return self

    # -- evaluation -------------------------------------------------------
    def models(self):
        return forecasting_models(self.clients, self.server.global_encoder)

    def evaluate(self, protocol: str):
        e = self.cfg.eval
        models = self.models()
        tuned = protocol == "in_domain" and e.finetune_epochs > 0
        if tuned:
            models = [
                finetune(c, m, e.finetune_epochs, self.cfg.train, e.seed)
                for c, m in zip(self.clients, models)
            ]
        rep = evaluate(
            models,
            self.federation,
            protocol,
            self.schedule,
            horizons=e.horizons,
            seed=e.seed,
            n_samples=e.n_samples,
            mase_season=e.mase_season,
            feed_back=e.feed_back,
        )
        rep.meta.update(
            {"config_hash": self.hash, "variant": self.cfg.variant, "round": self.round, "seed": self.cfg.seed}
        )
        if tuned:
            rep.meta["finetune"] = {"epochs": e.finetune_epochs, "groups": "all"}
        return rep

    def evaluate_all(self):
        return [self.evaluate(p) for p in self.cfg.eval.protocols]

    # -- checkpoints ------------------------------------------------------
    def save_checkpoint(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        s = self.server
        tensors = OrderedDict(s.global_encoder)
        if s.classifier_state is not None:
            tensors.update((f"clf.{k}", v) for k, v in s.classifier_state.items())
        hist_meta = []
        for r, entry in enumerate(s.prototype_history):
            ids = []
            for cid, p in entry:
                tensors[f"hist.{r}.{cid}"] = torch.as_tensor(p)
                ids.append(cid)
            hist_meta.append(ids)
        meta = {
            "round": s.round,
            "global_prototype": None if s.global_prototype is None else torch.as_tensor(s.global_prototype).tolist(),
            "history": hist_meta,
            "has_classifier": s.classifier_state is not None,
            "variant": self.cfg.variant,
        }
        if s.global_prototype is not None:
            tensors["global_prototype"] = torch.as_tensor(s.global_prototype)
        checkpoint.save_tensors(d / "server", tensors, meta, self.hash)
        checkpoint.save_tensors(
            d / "encoder", s.global_encoder, {"encoder_only": True, "model_config": dataclasses.asdict(self.model_cfg)}, self.hash
        )
        for c in self.clients:
            t = OrderedDict((f"model.{k}", v) for k, v in c.model.state_dict().items())
            t.update(c.optimizer.state_tensors())
            meta = {
                "client_id": c.client_id,
                "adam_t": c.optimizer.t,
                "rng": _rng_state_json(c.rng),
                "torch_gen": c.torch_gen.get_state().tolist(),
            }
            checkpoint.save_tensors(d / f"client_{c.client_id}", t, meta, self.hash)
        return d

    def load_checkpoint(self, directory) -> None:
        d = Path(directory)
        tensors, manifest = checkpoint.load_tensors(d / "server")
        if manifest["config_hash"] != self.hash:
            raise ValueError(
                f"checkpoint config hash {manifest['config_hash']} != experiment hash {self.hash}"
            )
        meta = manifest["meta"]
        enc = OrderedDict((k, v) for k, v in tensors.items() if k.startswith("encoder."))
        clf = None
        if meta["has_classifier"]:
            clf = OrderedDict((k[4:], v) for k, v in tensors.items() if k.startswith("clf."))
        history = [
            [(cid, tensors[f"hist.{r}.{cid}"].numpy().copy()) for cid in ids]
            for r, ids in enumerate(meta["history"])
        ]
        gp = tensors["global_prototype"].numpy().copy() if "global_prototype" in tensors else None
        self.server = ServerState(meta["round"], enc, gp, history, clf)
        for c in self.clients:
            t, man = checkpoint.load_tensors(d / f"client_{c.client_id}")
            c.model.load_state_dict(
                OrderedDict((k[6:], v) for k, v in t.items() if k.startswith("model.")), strict=True
            )
            c.optimizer.load_state_tensors(t, man["meta"]["adam_t"])
            c.rng = _rng_from_state(man["meta"]["rng"])
            c.torch_gen.set_state(torch.tensor(man["meta"]["torch_gen"], dtype=torch.uint8))


# -- run directory ----------------------------------------------------------


def resolve_out_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    if override:
        return Path(override)
    root = os.environ.get("FEDTRL_OUT")
    if root:
        return Path(root) / Path(cfg.out_dir).name
    return Path(cfg.out_dir)


def run_experiment(cfg: ExperimentConfig, out_dir=None, resume_from=None) -> dict:
    """Train, evaluate and write every artifact of one run into ``out_dir``."""
    out = resolve_out_dir(cfg, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment(cfg)
    h = exp.hash
    (out / "config.json").write_text(
        json.dumps(
            {"config_hash": h, "config": config_to_dict(cfg), "effective": config_to_dict(exp.cfg)},
            indent=2,
            sort_keys=True,
        )
    )
    cfg = exp.cfg
    fed_manifest = federation_manifest(exp.federation)
    fed_manifest["config_hash"] = h
    (out / "federation.json").write_text(json.dumps(fed_manifest))
    ckpt_root = out / "checkpoints"
    if resume_from is not None:
        exp.load_checkpoint(resume_from)
    log_path = out / "rounds.jsonl"
    mode = "a" if resume_from is not None else "w"

    with open(log_path, mode) as log_fh:

        def on_round(e: Experiment, report):
            rec = report.to_dict()
            rec["config_hash"] = h
            rec["variant"] = cfg.variant
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()
            if cfg.checkpoint_every and e.round % cfg.checkpoint_every == 0:
                e.save_checkpoint(ckpt_root / f"round_{e.round:04d}")
            if cfg.eval.eval_every and e.round % cfg.eval.eval_every == 0:
                rep = e.evaluate("zero_shot")
                log_fh.write(
                    json.dumps(
                        {"config_hash": h, "round": e.round, "eval": rep.to_dict()}, sort_keys=True
                    )
                    + "\n"
                )
            log.info("round %d done: w=%s", e.round, np.round(report.weights, 4).tolist())

        try:
            exp.run(on_round=on_round)
        except Exception:
            checkpoint.save_tensors(
                ckpt_root / "last_completed" / "encoder",
                exp.server.global_encoder,
                {"encoder_only": True, "round": exp.round},
                h,
            )
            raise

    exp.save_checkpoint(ckpt_root / "final")
    reports = exp.evaluate_all()
    write_reports(reports, out, h, {"variant": cfg.variant, "seed": cfg.seed})
    manifest = {
        "config_hash": h,
        "seed": cfg.seed,
        "variant": cfg.variant,
        "rounds_completed": exp.round,
        "code_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "client_seeds": "SeedSequence([seed, client_id, stream])",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"out_dir": str(out), "config_hash": h, "reports": reports, "experiment": exp}
