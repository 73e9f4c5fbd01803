"""One client's local round: mini-batch SGD on the combined objective,
followed by a single evaluation pass that produces the routing statistics
and per-expert deltas uploaded to the server."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import ClientDataset
from .numeric import sigmoid


@dataclass
class RegContext:
    """Everything the regularizer needs during one local round.

    alpha is precomputed from the previous round's statistics; the mask is
    fixed policy (top-k of the local softmax union top-k of the reference).
    """

    p_g: np.ndarray  # (S,) global routing reference, sums to 1
    eta: float  # overlap threshold feeding alpha
    lam: float  # balancing coefficient on the regularizer
    alpha: np.ndarray  # (S,) adaptive per-expert weights

    def __post_init__(self):
        self.p_g = np.asarray(self.p_g, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if np.any(self.p_g < 0) or abs(self.p_g.sum() - 1.0) > 1e-9:
            raise ValueError("p_g must be a distribution")


@dataclass
class RoutingStats:
    p_bar: np.ndarray  # (S,) mean top-k routing mass
    overlap: np.ndarray  # (S,) client-side overlap that fed alpha this round
    margin: np.ndarray  # (S,) mean top-1 decision margin
    mu: np.ndarray  # (S, hidden_dim) mean hidden state per argmax expert
    mu_empty: np.ndarray  # (S,) bool, True where no sample argmaxed to e
    dataset_size: int


@dataclass
class ExpertDelta:
    flat: np.ndarray  # (S, P) flattened per-expert update, w1|b1|w2|b2
    activated: np.ndarray  # (S,) bool


@dataclass
class LocalRoundResult:
    client_id: int
    delta: ExpertDelta
    stats: RoutingStats
    params: M.ModelParams  # full updated local parameters
    param_delta: M.ModelParams  # new - old for every block (server plumbing)
    mean_local_loss: float
    mean_reg_loss: float
    epochs_run: int = field(default=0)


def compute_p_bar(trace: M.ForwardTrace) -> np.ndarray:
    """Mean of the sparse top-k probabilities; zero mass off the active set."""
    return trace.topk_probs.mean(axis=0)


def compute_margin(trace: M.ForwardTrace) -> np.ndarray:
    """Mean positive dominance of each expert's full-softmax probability over
    the best alternative; at most one expert per sample contributes."""
    fp = trace.full_probs
    s = fp.shape[1]
    order = np.argsort(-fp, axis=1, kind="stable")
    top = order[:, 0]
    gap = fp[np.arange(fp.shape[0]), top] - fp[np.arange(fp.shape[0]), order[:, 1]]
    margin = np.zeros(s)
    np.add.at(margin, top, np.maximum(gap, 0.0))
    return margin / fp.shape[0]


def compute_mu(trace: M.ForwardTrace) -> tuple[np.ndarray, np.ndarray]:
    """Mean hidden state per expert over samples whose argmax gate score is
    that expert; empty assignment sets a zero row plus a flag."""
    s = trace.scores.shape[1]
    h = trace.hidden
    assign = np.argmax(trace.scores, axis=1)  # ties -> lowest index
    mu = np.zeros((s, h.shape[1]))
    empty = np.ones(s, dtype=bool)
    for e in range(s):
        rows = np.nonzero(assign == e)[0]
        if rows.size:
            mu[e] = h[rows].mean(axis=0)
            empty[e] = False
    return mu, empty


def compute_alpha(overlap: np.ndarray, eta: float) -> np.ndarray:
    """Adaptive regularization weight: sigmoid(overlap - eta) per expert."""
    return sigmoid(np.asarray(overlap, dtype=np.float64) - eta)


def reg_loss(trace: M.ForwardTrace, ctx: RegContext, top_k: int) -> float:
    """Batch-mean masked KL between the local routing softmax and p_g."""
    total = 0.0
    for i in range(trace.batch_size):
        total += M.masked_kl(trace.full_probs[i], ctx.p_g, ctx.alpha, top_k)
    return total / trace.batch_size


def local_round(
    config: M.MoEConfig,
    params_in: M.ModelParams,
    shard: ClientDataset,
    ctx: RegContext,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 32,
    prox_mu: float = 0.0,
    prox_ref: M.ModelParams | None = None,
    overlap: np.ndarray | None = None,
) -> LocalRoundResult:
    """Run E epochs of mini-batch SGD on L_total, then compute RoutingStats
    in one evaluation pass with the final parameters.

    prox_mu > 0 adds the proximal penalty toward prox_ref to every block's
    gradient (FedProx client). lr may be 0, which degenerates to a pure
    evaluation pass with zero deltas.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    params = params_in.copy()
    activated = np.zeros(config.num_experts, dtype=bool)

    n = shard.size
    for _epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            trace, loss = M.forward(config, params, shard.features[idx], shard.labels[idx])
            if loss is None or not np.isfinite(loss):
                raise FloatingPointError(
                    f"client {shard.client_id}: non-finite training loss, aborting round"
                )
            for e in trace.expert_cache:
                activated[e] = True
            grads = M.backward(trace, params, config, lam=ctx.lam, reg_ctx=ctx)
            for b in M.ModelParams.BLOCKS:
                g = getattr(grads, b)
                if prox_mu > 0.0 and prox_ref is not None:
                    g = g + prox_mu * (getattr(params, b) - getattr(prox_ref, b))
                getattr(params, b)[...] -= lr * g
            params.check_finite()

    # Statistics reflect the uploaded model: one pass over the whole shard.
    trace, mean_local = M.forward(config, params, shard.features, shard.labels)
    mean_reg = reg_loss(trace, ctx, config.top_k)
    mu, empty = compute_mu(trace)
    stats = RoutingStats(
        p_bar=compute_p_bar(trace),
        overlap=np.zeros(config.num_experts) if overlap is None else np.asarray(overlap),
        margin=compute_margin(trace),
        mu=mu,
        mu_empty=empty,
        dataset_size=n,
    )

    flat = np.stack(
        [params.expert_flat(e) - params_in.expert_flat(e) for e in range(config.num_experts)]
    )
    delta = ExpertDelta(flat=flat, activated=activated)
    param_delta = M.ModelParams(
        *(getattr(params, b) - getattr(params_in, b) for b in M.ModelParams.BLOCKS)
    )
    return LocalRoundResult(
        client_id=shard.client_id,
        delta=delta,
        stats=stats,
        params=params,
        param_delta=param_delta,
        mean_local_loss=mean_local,
        mean_reg_loss=mean_reg,
        epochs_run=epochs,
    )


def save_upload(path_prefix, config: M.MoEConfig, result: LocalRoundResult):
    """Client upload payload: binary blob of per-expert flattened deltas and
    mu rows, plus a JSON sidecar of the scalar statistics."""
    stats = result.stats
    with open(f"{path_prefix}.bin", "wb") as fh:
        fh.write(b"FUP1")
        np.array(
            [config.num_experts, result.delta.flat.shape[1], stats.mu.shape[1]],
            dtype="<u4",
        ).tofile(fh)
        fh.write(np.ascontiguousarray(result.delta.flat, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(stats.mu, dtype="<f8").tobytes())
    sidecar = {
        "client_id": result.client_id,
        "dataset_size": stats.dataset_size,
        "p_bar": stats.p_bar.tolist(),
        "overlap": stats.overlap.tolist(),
        "margin": stats.margin.tolist(),
        "mu_empty": stats.mu_empty.astype(int).tolist(),
        "activated": result.delta.activated.astype(int).tolist(),
        "mean_local_loss": result.mean_local_loss,
        "mean_reg_loss": result.mean_reg_loss,
    }
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_upload(path_prefix) -> tuple[ExpertDelta, RoutingStats, dict]:
    with open(f"{path_prefix}.bin", "rb") as fh:
        if fh.read(4) != b"FUP1":
            raise ValueError("bad upload magic")
        s, p, h = np.fromfile(fh, dtype="<u4", count=3)
        flat = np.fromfile(fh, dtype="<f8", count=int(s * p)).reshape(int(s), int(p))
        mu = np.fromfile(fh, dtype="<f8", count=int(s * h)).reshape(int(s), int(h))
    with open(f"{path_prefix}.json") as fh:
        side = json.load(fh)
    stats = RoutingStats(
        p_bar=np.array(side["p_bar"]),
        overlap=np.array(side["overlap"]),
        margin=np.array(side["margin"]),
        mu=mu,
        mu_empty=np.array(side["mu_empty"], dtype=bool),
        dataset_size=side["dataset_size"],
    )
    delta = ExpertDelta(flat=flat, activated=np.array(side["activated"], dtype=bool))
    return delta, stats, side
