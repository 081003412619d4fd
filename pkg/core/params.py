from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Literal

import numpy as np
import torch
from torch import nn

from common.errors import CheckpointError

ModelKind = Literal["detector", "gce"]


@dataclass(frozen=True)
class ParamStore:
    """Named float32 parameter arrays of one network plus its config identity."""

    kind: ModelKind
    config_json: str
    config_hash: str
    tensors: Dict[str, np.ndarray]

    @property
    def num_parameters(self) -> int:
        return int(sum(array.size for array in self.tensors.values()))


def to_param_store(module: nn.Module, *, kind: ModelKind, config_json: str, config_hash: str) -> ParamStore:
    tensors = {
        name: value.detach().cpu().to(torch.float32).numpy().copy()
        for name, value in module.state_dict().items()
    }
    return ParamStore(kind=kind, config_json=config_json, config_hash=config_hash, tensors=tensors)


def load_param_store(module: nn.Module, store: ParamStore, *, expected_hash: str) -> nn.Module:
    """Copy stored arrays into ``module`` after checking names, shapes and config."""
    if store.config_hash != expected_hash:
        raise CheckpointError(
            "Checkpoint was written for a different architecture.",
            details={"stored": store.config_hash, "expected": expected_hash},
        )

    state = module.state_dict()
    missing = sorted(set(state) - set(store.tensors))
    unexpected = sorted(set(store.tensors) - set(state))
    if missing or unexpected:
        raise CheckpointError(
            "Checkpoint parameter names do not match the model.",
            details={"missing": missing[:5], "unexpected": unexpected[:5]},
        )

    loaded = {}
    for name, current in state.items():
        array = store.tensors[name]
        if tuple(array.shape) != tuple(current.shape):
            raise CheckpointError(
                f"Shape mismatch for parameter '{name}'.",
                details={"stored": list(array.shape), "expected": list(current.shape)},
            )
        loaded[name] = torch.from_numpy(array.copy()).to(dtype=current.dtype, device=current.device)

    module.load_state_dict(loaded)
    return module
