"""Sparsity measurement and pruning by the log-alpha threshold rule."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import DEFAULT_ETA, log_alpha_array


class SparsityError(ValueError):
    pass


@dataclass
class SparsityReport:
    eta: float
    dropped: dict[str, int] = field(default_factory=dict)
    total: dict[str, int] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        n = sum(self.total.values())
        return sum(self.dropped.values()) / n if n else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _require_variational(model):
    if not model.variational_layers():
        raise SparsityError("sparsity is only defined for variational models")


def measure_sparsity(model, eta: float = DEFAULT_ETA) -> SparsityReport:
    """Fraction of weights (biases excluded) whose log alpha exceeds ``eta``."""
    _require_variational(model)
    report = SparsityReport(float(eta))
    for i, layer in model.variational_layers():
        la = log_alpha_array(layer.theta.data, layer.log_sigma2.data)
        report.dropped[f"layer{i}"] = int(np.count_nonzero(la > eta))
        report.total[f"layer{i}"] = int(la.size)
    return report


def prune(model, eta: float = DEFAULT_ETA):
    """Copy of ``model`` with every dropped weight mean set to zero."""
    _require_variational(model)
    arrays = [p.data.copy() for p in model.params]
    lp_index = {(s.layer, s.role): k for k, s in enumerate(model.slots)}
    for i, layer in model.variational_layers():
        la = log_alpha_array(layer.theta.data, layer.log_sigma2.data)
        k = lp_index[(i, "theta")]
        arrays[k] = np.where(la > eta, 0.0, arrays[k])
    return model.with_params(arrays)


def nonzero_weights(model) -> int:
    return int(sum(np.count_nonzero(l.theta.data) for _, l in model.variational_layers()))
