"""Server half of a federated round: domain-aware aggregation (DaG) and the
FedAvg baseline it falls back to under ablation."""

from __future__ import annotations

from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .client import ClientState, TrainConfig, local_update
from .model import MLPClassifier, init_parameters


@dataclass
class DaGConfig:
    alpha: float = 1.0
    dag_beta: float = 0.5
    tau: float = 1.0
    history: int = 5
    invert_invariance: bool = False
    classifier_hidden: int = 64
    classifier_epochs: int = 5
    classifier_lr: float = 5e-4
    classifier_batch: int = 0  # 0 -> full batch
    warm_start: bool = False
    aggregation: str = "dag"  # or "fedavg"

    def __post_init__(self):
        if self.alpha < 0 or self.dag_beta < 0:
            raise ValueError("alpha and dag_beta must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if self.aggregation not in ("dag", "fedavg"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class ServerState:
    round: int
    global_encoder: "OrderedDict[str, torch.Tensor]"
    global_prototype: np.ndarray | None = None
    # one entry per past round: list of (client_id, prototype)
    prototype_history: list = field(default_factory=list)
    classifier_state: "OrderedDict[str, torch.Tensor] | None" = None


@dataclass
class AggregationReport:
    round: int
    weights: list
    scores: list
    invariance: list | None
    deviation: list
    global_prototype: list
    prototype_norms: list
    client_losses: dict = field(default_factory=dict)
    aggregation: str = "dag"

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "aggregation": self.aggregation,
            "ell": self.invariance,
            "delta": self.deviation,
            "s": self.scores,
            "w": self.weights,
            "global_prototype": self.global_prototype,
            "prototype_norms": self.prototype_norms,
            "losses": self.client_losses,
        }


# -- aggregation primitives -----------------------------------------------


def aggregate_prototypes(updates) -> np.ndarray:
    n = np.array([u.n_k for u in updates], dtype=np.float64)
    if n.sum() <= 0:
        raise ValueError("total sample count is zero")
    protos = np.stack([np.asarray(u.prototype, dtype=np.float64) for u in updates])
    return (n / n.sum()) @ protos


def deviation_scores(prototypes, global_prototype) -> np.ndarray:
    protos = np.asarray(prototypes, dtype=np.float64)
    return ((protos - np.asarray(global_prototype)[None, :]) ** 2).sum(axis=1)


def dag_weights(ell, delta, alpha=1.0, beta=0.5, tau=1.0, invert_invariance=False):
    """Softmax of ``s_k / tau`` with ``s_k = -alpha*ell_k - beta*delta_k``.

    ``invert_invariance`` flips the sign on the invariance term. Returns
    ``(weights, scores)``.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be >= 0")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    ell = np.asarray(ell, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    sign = 1.0 if invert_invariance else -1.0
    s = sign * alpha * ell - beta * delta
    z = s / tau
    e = np.exp(z - z.max())
    return e / e.sum(), s


def aggregate_encoders(encoders, weights) -> "OrderedDict[str, torch.Tensor]":
    """Coordinatewise convex combination ``sum_k w_k theta_k``."""
    if not encoders:
        raise ValueError("no encoders to aggregate")
    w = [float(x) for x in weights]
    if len(w) != len(encoders):
        raise ValueError("one weight per encoder required")
    keys = list(encoders[0])
    out = OrderedDict()
    for key in keys:
        shape = encoders[0][key].shape
        acc = None
        for wk, enc in zip(w, encoders):
            if key not in enc or enc[key].shape != shape:
                raise ValueError(f"encoder parameter {key} missing or misshapen")
            term = wk * enc[key]
            acc = term if acc is None else acc + term
        out[key] = acc
    for enc in encoders[1:]:
        if set(enc) != set(keys):
            raise ValueError("encoders disagree on parameter names")
    return out


def fedavg_weights(n) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    return n / n.sum()


def fedavg_aggregate(encoders, n):
    return aggregate_encoders(encoders, fedavg_weights(n))


# -- global domain classifier ---------------------------------------------


def history_arrays(history, index=None):
    """Stack a prototype history into ``(X, y)``; ``index`` maps client ids to class indices."""
    protos, labels = [], []
    for entry in history:
        for cid, p in entry:
            protos.append(np.asarray(p, dtype=np.float64))
            labels.append(cid if index is None else index[cid])
    return np.stack(protos), np.asarray(labels)


def train_domain_classifier(
    history,
    n_clients: int,
    epochs: int = 5,
    lr: float = 5e-4,
    seed: int = 0,
    hidden: int = 64,
    batch_size: int = 0,
    init_state=None,
    index=None,
) -> MLPClassifier:
    """Fit f_d: prototype -> client index by cross-entropy gradient descent, then freeze it.

    ``history`` is a list of rounds, each a list of ``(client_id, prototype)``.
    The output layer starts at zero so every client begins at the uniform
    prediction; ``batch_size=0`` trains on the whole (class-balanced) history
    at once. Together with plain gradient steps (an adaptive optimizer would
    blow rounding noise up to full-size steps) this keeps indistinguishable
    clients exactly symmetric.
    """
    X, y = history_arrays(history, index)
    missing = set(range(n_clients)) - set(y.tolist())
    if missing:
        raise ValueError(f"clients {sorted(missing)} have no prototype in the history")
    clf = MLPClassifier(X.shape[1], hidden, n_clients)
    init_parameters(clf, seed)
    if init_state is not None:
        clf.load_state_dict(init_state)
    else:
        with torch.no_grad():
            clf.fc2.weight.zero_()
            clf.fc2.bias.zero_()
    opt = torch.optim.SGD(clf.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    Xt, yt = torch.as_tensor(X), torch.as_tensor(y, dtype=torch.long)
    step = batch_size or len(X)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), step):
            idx = torch.as_tensor(order[start : start + step])
            opt.zero_grad()
            F.cross_entropy(clf(Xt[idx]), yt[idx]).backward()
            opt.step()
    for p in clf.parameters():
        p.requires_grad_(False)
    return clf


@torch.no_grad()
def invariance_scores(classifier, prototypes) -> np.ndarray:
    """Cross-entropy of the frozen classifier for row ``k`` against class ``k``."""
    X = torch.as_tensor(np.asarray(prototypes, dtype=np.float64))
    labels = torch.arange(len(X))
    return F.cross_entropy(classifier(X), labels, reduction="none").numpy()


# -- round ---------------------------------------------------------------


def initial_server_state(model) -> ServerState:
    return ServerState(round=0, global_encoder=model.encoder_state())


def round_seed(seed: int, round_idx: int) -> int:
    return int(np.random.SeedSequence([seed, round_idx, 7]).generate_state(1, np.uint64)[0] >> 1)


def run_round(
    state: ServerState,
    clients: list[ClientState],
    train_cfg: TrainConfig,
    dag_cfg: DaGConfig,
    seed: int = 0,
    workers: int = 1,
) -> tuple[ServerState, AggregationReport]:
    r = state.round + 1
    ge, gp = state.global_encoder, state.global_prototype

    def work(c):
        try:
            return local_update(c, ge, gp, r, train_cfg)
        except Exception as exc:
            raise RuntimeError(f"round {r}: client {c.client_id} failed: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(work, clients))
    else:
        updates = [work(c) for c in clients]

    K = len(updates)
    protos = np.stack([u.prototype for u in updates])
    p_g = aggregate_prototypes(updates)
    delta = deviation_scores(protos, p_g)
    history = list(state.prototype_history)
    clf_state = state.classifier_state
    ell = None
    if dag_cfg.aggregation == "dag":
        history.append([(u.client_id, u.prototype.copy()) for u in updates])
        history = history[-dag_cfg.history :]
        clf = train_domain_classifier(
            history,
            K,
            epochs=dag_cfg.classifier_epochs,
            lr=dag_cfg.classifier_lr,
            seed=round_seed(seed, r),
            hidden=dag_cfg.classifier_hidden,
            batch_size=dag_cfg.classifier_batch,
            init_state=clf_state if dag_cfg.warm_start else None,
            index={u.client_id: i for i, u in enumerate(updates)},
        )
        clf_state = OrderedDict((k, v.detach().clone()) for k, v in clf.state_dict().items())
        ell = invariance_scores(clf, protos)
        w, s = dag_weights(ell, delta, dag_cfg.alpha, dag_cfg.dag_beta, dag_cfg.tau, dag_cfg.invert_invariance)
    else:
        w = fedavg_weights([u.n_k for u in updates])
        s = np.log(w)
    theta = aggregate_encoders([u.encoder_params for u in updates], w)
    new_state = ServerState(r, theta, p_g, history, clf_state)
    report = AggregationReport(
        round=r,
        weights=w.tolist(),
        scores=s.tolist(),
        invariance=None if ell is None else ell.tolist(),
        deviation=delta.tolist(),
        global_prototype=p_g.tolist(),
        prototype_norms=np.linalg.norm(protos, axis=1).tolist(),
        client_losses={
            c.client_id: {
                "beta": c.last_losses.get("beta"),
                "mean_total": float(np.mean([h["total"] for h in c.last_losses["history"]]))
                if c.last_losses.get("history")
                else None,
            }
            for c in clients
        },
        aggregation=dag_cfg.aggregation,
    )
    return new_state, report
