"""Round engine for adaptive feature mixing plus the comparison baselines.

Every selected client runs two phases per round:

1. the received shared extractor is frozen while the local model and the mix
   vector are trained on mixed representations;
2. the local model and mix vector are frozen while the client's copy of the
   shared extractor is trained through the frozen local header.

The server then averages the uploaded extractors weighted by local training
set size. ``pfedafm_e2e`` replaces both phases by a single joint step, and
``standalone`` / ``fedavg`` / ``lg_fedavg`` only ever train the local model.

Random streams are keyed by ``(seed, stream, ids...)`` so each client's
shuffling depends only on its id and the round, never on the order in which
clients are processed. Aggregation always runs in ascending client-id order.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import data as datamod
from .autodiff import (NonFiniteError, Parameter, backward, cross_entropy, forward, sgd_step)
from .config import ExperimentConfig
from .metrics import accuracy, client_round_flops, mean_accuracy
from .models import (HomoExtractor, MixVector, SplitModel, build_homo_extractor, build_zoo_model,
                     mixed_backward, mixed_forward, param_count)

log = logging.getLogger(__name__)

# random-stream tags
DATA, PARTITION, SPLIT, MODEL, HOMO, SELECT, BATCH = range(1, 8)

# (phase, batch index, client) -> None; called after every SGD step
Observer = Callable[[str, int, "ClientState"], None]


class RoundFailure(RuntimeError):
    pass


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


@dataclass
class ClientState:
    client_id: int
    model: SplitModel
    alpha: MixVector
    split: datamod.ClientSplit
    eta_omega: float
    theta: HomoExtractor | None = None

    @property
    def eta_alpha(self) -> float:
        return self.alpha.lr

    @property
    def eta_theta(self) -> float:
        return self.eta_omega

    @property
    def num_train(self) -> int:
        return len(self.split.train)


@dataclass
class ServerState:
    shared: list[Parameter]
    theta: HomoExtractor | None = None
    round: int = 0
    seed: int = 0
    client_ids: list[int] = field(default_factory=list)

    def shared_values(self) -> list[np.ndarray]:
        return [p.value for p in self.shared]

    def checksum(self) -> str | None:
        if not self.shared:
            return None
        h = hashlib.sha256()
        for p in self.shared:
            h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return h.hexdigest()


# -- building blocks ---------------------------------------------------------

def select_clients(N: int, C: float, round: int, seed: int) -> list[int]:
    """Uniform sample without replacement of round(C*N) clients, sorted."""
    if not 0 < C <= 1:
        raise ValueError("participation fraction must be in (0,1]")
    K = int(np.floor(C * N + 0.5))
    if K < 1:
        raise ValueError(f"C={C} with N={N} selects no clients")
    if K == N:
        return list(range(N))
    return sorted(int(k) for k in stream(seed, SELECT, round).choice(N, size=K, replace=False))


def _set_frozen(params: Sequence[Parameter], frozen: bool) -> None:
    for p in params:
        p.frozen = frozen


def _batches(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


def _checked_loss(loss: float, client: "ClientState", phase: str) -> None:
    if not np.isfinite(loss):
        raise NonFiniteError(f"client {client.client_id}: non-finite loss in {phase}")


def phase1_train_hetero(client: ClientState, theta: HomoExtractor, epochs: int, batch_size: int,
                        rng: np.random.Generator, observer: Observer | None = None) -> list[float]:
    """Train the local model and mix vector on mixed features with ``theta`` frozen."""
    _set_frozen(theta.parameters(), True)
    local = client.model.parameters()
    _set_frozen(local, False)
    client.alpha.alpha.frozen = False
    x, y = client.split.train.features, client.split.train.labels
    losses = []
    for i, idx in enumerate(_batches(len(y), batch_size, epochs, rng)):
        logits, tape = mixed_forward(x[idx], theta, client.model, client.alpha)
        loss, dlogits = cross_entropy(logits, y[idx])
        _checked_loss(loss, client, "phase 1")
        mixed_backward(tape, dlogits)
        sgd_step(local, client.eta_omega)
        sgd_step([client.alpha.alpha], client.eta_alpha)
        losses.append(loss)
        if observer is not None:
            observer("phase1", i, client)
    return losses


def phase2_train_homo(client: ClientState, theta: HomoExtractor, epochs: int, batch_size: int,
                      rng: np.random.Generator, observer: Observer | None = None) -> list[float]:
    """Train ``theta`` in place through the client's frozen header; no mixing here."""
    _set_frozen(client.model.parameters(), True)
    client.alpha.alpha.frozen = True
    shared = theta.parameters()
    _set_frozen(shared, False)
    x, y = client.split.train.features, client.split.train.labels
    header = [client.model.header]
    losses = []
    for i, idx in enumerate(_batches(len(y), batch_size, epochs, rng)):
        rep, homo_tape = forward(theta.layers, x[idx])
        logits, head_tape = forward(header, rep)
        loss, dlogits = cross_entropy(logits, y[idx])
        _checked_loss(loss, client, "phase 2")
        backward(homo_tape, backward(head_tape, dlogits))
        sgd_step(shared, client.eta_theta)
        losses.append(loss)
        if observer is not None:
            observer("phase2", i, client)
    _set_frozen(client.model.parameters(), False)
    client.alpha.alpha.frozen = False
    return losses


def train_end_to_end(client: ClientState, theta: HomoExtractor, epochs: int, batch_size: int,
                     rng: np.random.Generator, observer: Observer | None = None) -> list[float]:
    """Single joint SGD step per batch on theta, the local model and alpha."""
    local = client.model.parameters() + theta.parameters()
    _set_frozen(local, False)
    client.alpha.alpha.frozen = False
    x, y = client.split.train.features, client.split.train.labels
    losses = []
    for i, idx in enumerate(_batches(len(y), batch_size, epochs, rng)):
        logits, tape = mixed_forward(x[idx], theta, client.model, client.alpha)
        loss, dlogits = cross_entropy(logits, y[idx])
        _checked_loss(loss, client, "end-to-end")
        mixed_backward(tape, dlogits)
        sgd_step(local, client.eta_omega)
        sgd_step([client.alpha.alpha], client.eta_alpha)
        losses.append(loss)
        if observer is not None:
            observer("e2e", i, client)
    return losses


def train_local(client: ClientState, epochs: int, batch_size: int, rng: np.random.Generator,
                observer: Observer | None = None) -> list[float]:
    """Plain SGD on the local model alone."""
    params = client.model.parameters()
    _set_frozen(params, False)
    layers = client.model.layers()
    x, y = client.split.train.features, client.split.train.labels
    losses = []
    for i, idx in enumerate(_batches(len(y), batch_size, epochs, rng)):
        logits, tape = forward(layers, x[idx])
        loss, dlogits = cross_entropy(logits, y[idx])
        _checked_loss(loss, client, "local training")
        backward(tape, dlogits)
        sgd_step(params, client.eta_omega)
        losses.append(loss)
        if observer is not None:
            observer("local", i, client)
    return losses


def aggregation_weights(sizes: Sequence[float]) -> list[float]:
    """``n_k / sum(n)`` over the participants."""
    if len(sizes) == 0 or any(not s > 0 for s in sizes):
        raise ValueError("sizes must be a non-empty list of positive numbers")
    total = float(sum(sizes))
    return [float(s) / total for s in sizes]


def aggregate(thetas: Sequence[Sequence[np.ndarray]], sizes: Sequence[float]) -> list[np.ndarray]:
    """Weighted coordinate-wise mean with weights ``n_k / sum(n)``.

    Sums run in the given order (callers pass ascending client ids). The
    result is clamped into the per-coordinate [min, max] of the inputs, which
    only removes rounding overshoot and makes averaging identical inputs exact.
    """
    if len(thetas) == 0:
        raise ValueError("nothing to aggregate")
    if len(sizes) != len(thetas):
        raise ValueError("need one size per uploaded model")
    weights = aggregation_weights(sizes)
    ref = [np.shape(a) for a in thetas[0]]
    for t in thetas[1:]:
        if [np.shape(a) for a in t] != ref:
            raise ValueError("uploaded models have mismatched shapes")
    out = []
    for j in range(len(ref)):
        stack = [np.asarray(t[j], dtype=np.float64) for t in thetas]
        acc = weights[0] * stack[0]
        for w, a in zip(weights[1:], stack[1:]):
            acc = acc + w * a
        lo, hi = stack[0], stack[0]
        for a in stack[1:]:
            lo, hi = np.minimum(lo, a), np.maximum(hi, a)
        out.append(np.clip(acc, lo, hi))
    return out


def squared_distance(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum((x - y) ** 2) for x, y in zip(a, b)))


# -- federation --------------------------------------------------------------

@dataclass
class Federation:
    config: ExperimentConfig
    seed: int
    dataset: datamod.LabeledDataset
    server: ServerState
    clients: list[ClientState]


def load_dataset(cfg: ExperimentConfig, seed: int) -> datamod.LabeledDataset:
    if cfg.dataset == "synthetic":
        return datamod.generate_synthetic(cfg.num_classes, cfg.input_dim, cfg.per_class, cfg.spread,
                                          derive_seed(seed, DATA))
    return datamod.load_external(cfg.data_path, cfg.dataset, labels_path=cfg.labels_path or None,
                                 num_classes=cfg.num_classes, expected_dim=cfg.input_dim)


def partition(cfg: ExperimentConfig, dataset: datamod.LabeledDataset, seed: int) -> list[np.ndarray]:
    if cfg.partition == "pathological":
        return datamod.pathological_partition(dataset, cfg.N, cfg.classes_per_client,
                                              derive_seed(seed, PARTITION))
    return datamod.dirichlet_partition(dataset, cfg.N, cfg.gamma, derive_seed(seed, PARTITION))


def variant_for(cfg: ExperimentConfig, client_id: int) -> int:
    return client_id % 5 if cfg.zoo == "heterogeneous" else cfg.zoo_variant


def _shared_params(algorithm: str, client: ClientState) -> list[Parameter]:
    if algorithm in ("pfedafm", "pfedafm_e2e"):
        return client.theta.parameters()
    if algorithm == "fedavg":
        return client.model.parameters()
    if algorithm == "lg_fedavg":
        return client.model.header_params()
    return []


def build_federation(cfg: ExperimentConfig, seed: int | None = None) -> Federation:
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    dataset = load_dataset(cfg, seed)
    parts = partition(cfg, dataset, seed)
    # dirichlet can leave a label with a handful of samples on a client
    min_per_label = 5 if cfg.partition == "pathological" else 1
    theta0 = build_homo_extractor(dataset.input_dim, cfg.d, derive_seed(seed, HOMO), zoo_d=cfg.d)
    clients = []
    for k, idx in enumerate(parts):
        split = datamod.split_train_test(dataset, idx, 0.8, derive_seed(seed, SPLIT, k), client_id=k,
                                         min_per_label=min_per_label)
        model = build_zoo_model(variant_for(cfg, k), dataset.input_dim, cfg.d, dataset.num_classes,
                                derive_seed(seed, MODEL, k))
        clients.append(ClientState(k, model, MixVector.ones(cfg.d, cfg.eta_alpha), split, cfg.eta_omega,
                                   theta=theta0.copy()))

    algo = cfg.algorithm
    if algo in ("pfedafm", "pfedafm_e2e"):
        theta = theta0.copy()
        server = ServerState(theta.parameters(), theta=theta)
    elif algo in ("fedavg", "lg_fedavg"):
        # the global model starts from the lowest-id client's initialisation
        server = ServerState([p.copy() for p in _shared_params(algo, clients[0])])
    else:
        server = ServerState([])
    server.seed = seed
    server.client_ids = [c.client_id for c in clients]
    return Federation(cfg, seed, dataset, server, clients)


def evaluate_client(client: ClientState, algorithm: str) -> dict:
    x, y = client.split.test.features, client.split.test.labels
    large = accuracy(client.model.logits(x), y)
    if algorithm in ("pfedafm", "pfedafm_e2e"):
        mixed = accuracy(mixed_forward(x, client.theta, client.model, client.alpha)[0], y)
        rep = forward(client.theta.layers, x)[0]
        small = accuracy(forward([client.model.header], rep)[0], y)
        return {"test_accuracy": mixed, "small_accuracy": small, "large_accuracy": large}
    return {"test_accuracy": large, "small_accuracy": None, "large_accuracy": large}


def run_round(fed: Federation, observer: Observer | None = None) -> dict:
    """One round: broadcast, local update, upload, aggregate, evaluate."""
    cfg, server, clients = fed.config, fed.server, fed.clients
    algo = cfg.algorithm
    t = server.round + 1
    selected = select_clients(len(clients), cfg.C, t, fed.seed)
    per_client: dict[int, dict] = {}
    uploads = []
    for k in selected:
        client = clients[k]
        shared = _shared_params(algo, client)
        for p, g in zip(shared, server.shared):
            p.value[...] = g.value
        rng = stream(fed.seed, BATCH, k, t)
        alpha_before = client.alpha.mean()
        try:
            if algo == "pfedafm":
                losses = phase1_train_hetero(client, client.theta, cfg.E, cfg.batch_size, rng, observer)
                losses2 = phase2_train_homo(client, client.theta, cfg.E, cfg.batch_size, rng, observer)
            elif algo == "pfedafm_e2e":
                losses = train_end_to_end(client, client.theta, cfg.E, cfg.batch_size, rng, observer)
                losses2 = []
            else:
                losses = train_local(client, cfg.E, cfg.batch_size, rng, observer)
                losses2 = []
        except (NonFiniteError, ValueError) as exc:
            raise RoundFailure(f"round {t}, client {k}: {exc}") from exc
        uploads.append([p.value.copy() for p in shared])
        mixes = algo in ("pfedafm", "pfedafm_e2e")
        per_client[k] = {
            "client_id": k,
            "train_loss": float(np.mean(losses)),
            "phase2_loss": float(np.mean(losses2)) if losses2 else None,
            "alpha_mean_before": alpha_before if mixes else None,
            "alpha_mean": client.alpha.mean() if mixes else None,
            "num_train": client.num_train,
            "flops": client_round_flops(algo, client.model, client.theta, client.num_train, cfg.E),
        }

    delta_sq = None
    if server.shared:
        new = aggregate(uploads, [clients[k].num_train for k in selected])
        for p, v in zip(server.shared, new):
            p.value[...] = v
        delta_sq = max(squared_distance(new, up) for up in uploads)
        if not np.isfinite(delta_sq):
            raise RoundFailure(f"round {t}: non-finite parameter variation")
        # participants hold the fresh aggregate; the rest keep what they last received
        for k in selected:
            for p, v in zip(_shared_params(algo, clients[k]), new):
                p.value[...] = v
    server.round = t

    all_acc = {}
    for client in clients:
        ev = evaluate_client(client, algo)
        all_acc[client.client_id] = ev["test_accuracy"]
        if client.client_id in per_client:
            per_client[client.client_id].update(ev)

    shared_count = sum(p.size for p in server.shared)
    rows = [per_client[k] for k in selected]
    small = [r["small_accuracy"] for r in rows if r["small_accuracy"] is not None]
    record = {
        "round": t,
        "algorithm": algo,
        "selected": list(selected),
        "clients": rows,
        "mean_accuracy": mean_accuracy([r["test_accuracy"] for r in rows]),
        "small_mean_accuracy": mean_accuracy(small) if small else None,
        "large_mean_accuracy": mean_accuracy([r["large_accuracy"] for r in rows]),
        "all_client_mean_accuracy": mean_accuracy(list(all_acc.values())),
        "mean_train_loss": mean_accuracy([r["train_loss"] for r in rows]),
        "theta_checksum": server.checksum(),
        "delta_sq": delta_sq,
        "uplink_params": len(selected) * shared_count,
        "downlink_params": len(selected) * shared_count,
        "avg_client_flops": int(round(np.mean([r["flops"] for r in rows]))),
    }
    log.debug("round %d mean acc %.4f", t, record["mean_accuracy"])
    return record


@dataclass
class ExperimentResult:
    records: list[dict]
    federation: Federation

    @property
    def clients(self) -> list[ClientState]:
        return self.federation.clients

    @property
    def server(self) -> ServerState:
        return self.federation.server

    def best_mean_accuracy(self) -> float | None:
        return max((r["mean_accuracy"] for r in self.records), default=None)


def run_experiment(cfg: ExperimentConfig, seed: int | None = None,
                   observer: Observer | None = None) -> ExperimentResult:
    fed = build_federation(cfg, seed)
    records = []
    best = -np.inf
    for _ in range(cfg.T):
        rec = run_round(fed, observer)
        best = max(best, rec["mean_accuracy"])
        rec["best_mean_accuracy"] = best
        records.append(rec)
    return ExperimentResult(records, fed)


def baseline_standalone(cfg: ExperimentConfig, seed: int | None = None) -> ExperimentResult:
    return run_experiment(cfg.replace(algorithm="standalone"), seed)


def baseline_fedavg(cfg: ExperimentConfig, seed: int | None = None) -> ExperimentResult:
    return run_experiment(cfg.replace(algorithm="fedavg"), seed)


def baseline_lg_fedavg(cfg: ExperimentConfig, seed: int | None = None) -> ExperimentResult:
    return run_experiment(cfg.replace(algorithm="lg_fedavg"), seed)


def variant_end_to_end(cfg: ExperimentConfig, seed: int | None = None) -> ExperimentResult:
    return run_experiment(cfg.replace(algorithm="pfedafm_e2e"), seed)
