"""Checkpoints as a single ``.npz`` container keyed by parameter path.

Layout::

    meta                      JSON string (configs, epoch, format version)
    model/<state_dict key>    parameters in the model dtype
    pool/Q, pool/lambda, pool/eps, pool/updates
    optim/<i>/step|exp_avg|exp_avg_sq   Adam moments, by parameter order
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .backbone import BackboneConfig
from .causal_pool import ContextPool
from .model import CICAM, ModelConfig

FORMAT_VERSION = 1


def model_config_to_dict(config: ModelConfig) -> dict[str, Any]:
    return dataclasses.asdict(config)


def model_config_from_dict(d: dict[str, Any]) -> ModelConfig:
    d = dict(d)
    d["backbone"] = BackboneConfig(**d["backbone"])
    return ModelConfig(**d)


def save_checkpoint(path: str | os.PathLike, model: CICAM, pool: ContextPool,
                    optimizer: torch.optim.Optimizer | None = None, **meta: Any) -> Path:
    arrays: dict[str, np.ndarray] = {}
    for key, value in model.state_dict().items():
        arrays[f"model/{key}"] = value.detach().cpu().numpy()
    arrays["pool/Q"] = pool.Q.cpu().numpy()
    arrays["pool/lambda"] = np.asarray(pool.lam)
    arrays["pool/eps"] = np.asarray(pool.eps)
    arrays["pool/updates"] = np.asarray(pool.updates, dtype=np.int64)
    if optimizer is not None:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        for i, p in enumerate(params):
            for name, value in optimizer.state.get(p, {}).items():
                arrays[f"optim/{i}/{name}"] = torch.as_tensor(value).cpu().numpy()
    info = {"format": FORMAT_VERSION, "model_config": model_config_to_dict(model.config), **meta}
    arrays["meta"] = np.asarray(json.dumps(info, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path: str | os.PathLike, optimizer_factory=None):
    """Return ``(model, pool, meta)``, plus the restored optimizer if a factory is given.

    ``optimizer_factory(model)`` must build the optimizer with the same parameter order.
    """
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays["meta"]))
    config = model_config_from_dict(meta["model_config"])
    model = CICAM(config)
    state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(state, strict=True)

    q = torch.from_numpy(arrays["pool/Q"].copy())
    pool = ContextPool(q.shape[0], q.shape[1], q.shape[2], float(arrays["pool/lambda"]),
                       float(arrays["pool/eps"]), dtype=q.dtype)
    pool.Q = q
    pool.updates = int(arrays["pool/updates"])
    if optimizer_factory is None:
        return model, pool, meta

    optimizer = optimizer_factory(model)
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for key, value in arrays.items():
        if not key.startswith("optim/"):
            continue
        _, idx, name = key.split("/")
        optimizer.state[params[int(idx)]][name] = torch.from_numpy(value.copy())
    return model, pool, meta, optimizer
