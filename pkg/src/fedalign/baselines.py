"""Reference aggregators run under the identical harness: FedAvg and the
FedProx proximal term. FedProx reuses FedAvg aggregation; its client-side
penalty is applied inside the shared local_round."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .server import weighted_average


@dataclass(frozen=True)
class BaselineKind:
    tag: str  # "fedavg" or "fedprox"
    prox_mu: float = 0.0

    def __post_init__(self):
        if self.tag not in ("fedavg", "fedprox"):
            raise ValueError(f"unknown baseline {self.tag!r}")
        if (self.tag == "fedprox") != (self.prox_mu > 0):
            raise ValueError("prox_mu > 0 iff fedprox")


def fedavg_aggregate(params: list[M.ModelParams], sizes) -> M.ModelParams:
    """Dataset-size-weighted average of every parameter block."""
    return M.ModelParams(
        *(
            weighted_average([getattr(p, b) for p in params], sizes)
            for b in M.ModelParams.BLOCKS
        )
    )


def prox_term(
    params: M.ModelParams, global_snapshot: M.ModelParams, mu: float
) -> tuple[float, M.ModelParams]:
    """(mu/2) * ||theta - theta_global||^2 and its gradient mu * (theta - theta_global)."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    loss = 0.0
    grads = []
    for b in M.ModelParams.BLOCKS:
        diff = getattr(params, b) - getattr(global_snapshot, b)
        loss += 0.5 * mu * float((diff * diff).sum())
        grads.append(mu * diff)
    return loss, M.ModelParams(*grads)
