"""Versioned JSON checkpoints with exact float64 round-trips.

Numbers are emitted with 17 significant decimal digits, which is enough
to reconstruct every IEEE-754 double bit-for-bit.  The emitter builds the
document by hand so that two runs of the same configuration produce
byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FedsiError
from .federation import GlobalDistribution, RoundHistory, TrainResult
from .model import LayerLayout

CHECKPOINT_VERSION = 1


class CheckpointError(FedsiError):
    """Checkpoint file is malformed or incompatible with the config/layout."""


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _vec(values: np.ndarray) -> str:
    return "[" + ",".join(_num(v) for v in values) + "]"


def _layout_json(layout: LayerLayout) -> str:
    return (f'{{"input_dim":{layout.input_dim},"hidden_dim":{layout.hidden_dim},'
            f'"output_dim":{layout.output_dim}}}')


def checkpoint_json(result: TrainResult, round_index: int, config_hash: str) -> str:
    """Serialize the training state after `round_index` completed rounds."""
    parts = [
        f'"version":{CHECKPOINT_VERSION}',
        f'"round":{round_index}',
        f'"layout":{_layout_json(result.layout)}',
        f'"algorithm":"{result.algorithm}"',
        f'"config_hash":"{config_hash}"',
    ]
    repr_size = result.layout.repr_size
    if result.global_dist is not None:
        parts.append(f'"mu":{_vec(result.global_dist.mu)}')
        parts.append(f'"sigma2":{_vec(result.global_dist.sigma2)}')
    elif result.global_theta is not None:
        parts.append(f'"mu":{_vec(result.global_theta)}')
        parts.append(f'"sigma2":{_vec(np.zeros(repr_size))}')
        parts.append(f'"phi":{_vec(result.global_phi)}')
    else:
        parts.append(f'"mu":{_vec(np.zeros(repr_size))}')
        parts.append(f'"sigma2":{_vec(np.zeros(repr_size))}')
        clients = []
        for cid, (theta, phi) in enumerate(zip(result.client_thetas,
                                               result.client_phis)):
            if theta is None:
                continue
            clients.append(f'{{"id":{cid},"theta":{_vec(theta)},"phi":{_vec(phi)}}}')
        parts.append('"clients":[' + ",".join(clients) + "]")
    return "{" + ",".join(parts) + "}\n"


@dataclass
class Checkpoint:
    """Parsed checkpoint contents, re-assembled into a TrainResult."""

    round_index: int
    config_hash: str
    result: TrainResult


def load_checkpoint(text: str, expected_hash: str | None = None) -> Checkpoint:
    try:
        blob = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')!r}")
    if expected_hash is not None and blob.get("config_hash") != expected_hash:
        raise CheckpointError(
            "checkpoint was produced by a different configuration "
            f"(hash {blob.get('config_hash')!r} != {expected_hash!r})")
    try:
        layout = LayerLayout(**blob["layout"])
        algorithm = blob["algorithm"]
        mu = np.asarray(blob["mu"], dtype=np.float64)
        sigma2 = np.asarray(blob["sigma2"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint is missing required fields: {exc}")
    if mu.shape != (layout.repr_size,) or sigma2.shape != (layout.repr_size,):
        raise CheckpointError(
            f"state vectors have length {mu.size}, layout expects {layout.repr_size}")

    result = TrainResult(algorithm=algorithm, layout=layout, history=RoundHistory())
    if algorithm in ("fedsi", "fedsi_fac"):
        result.global_dist = GlobalDistribution(mu=mu, sigma2=sigma2,
                                                round_index=int(blob["round"]))
    elif algorithm in ("fedavg", "fedavg_ft"):
        phi = np.asarray(blob.get("phi", []), dtype=np.float64)
        if phi.shape != (layout.decision_size,):
            raise CheckpointError("averaging checkpoint lacks a decision block")
        result.global_theta = mu
        result.global_phi = phi
    elif algorithm == "local_only":
        clients = blob.get("clients", [])
        n = max((c["id"] for c in clients), default=-1) + 1
        thetas: list = [None] * n
        phis: list = [None] * n
        for entry in clients:
            theta = np.asarray(entry["theta"], dtype=np.float64)
            phi = np.asarray(entry["phi"], dtype=np.float64)
            if theta.shape != (layout.repr_size,) or phi.shape != (layout.decision_size,):
                raise CheckpointError(f"client {entry['id']} state has wrong length")
            thetas[entry["id"]] = theta
            phis[entry["id"]] = phi
        result.client_thetas = thetas
        result.client_phis = phis
    else:
        raise CheckpointError(f"unknown algorithm {algorithm!r} in checkpoint")
    return Checkpoint(round_index=int(blob["round"]), config_hash=blob["config_hash"],
                      result=result)
