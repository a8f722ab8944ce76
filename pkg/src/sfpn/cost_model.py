"""Spike, synaptic-operation and energy accounting.

A conv layer with ``A`` dense accumulations per step whose input has
non-zero density ``s`` performs ``s * A`` additions per step; over ``T`` steps
that is ``s * T * A``.  Real-valued head convolutions are counted as MACs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .spikefpn import ConvBN, NetworkGraph

PJ_PER_ADD = 0.9
PJ_PER_MAC = 4.6


@dataclass
class LayerCost:
    name: str
    s_steps: list[float]
    A: int

    @property
    def s(self) -> float:
        return float(np.mean(self.s_steps)) if self.s_steps else 0.0

    @property
    def T(self) -> int:
        return len(self.s_steps)

    @property
    def ops(self) -> float:
        return float(sum(self.s_steps)) * self.A

    @property
    def energy_pj(self) -> float:
        return self.ops * PJ_PER_ADD


@dataclass
class FiringReport:
    T: int
    neuron_rates: dict[str, list[float]]
    neuron_sizes: dict[str, int]
    layers: list[LayerCost] = field(default_factory=list)
    head_macs: int = 0

    def layer_rate(self, name: str) -> float:
        return float(np.mean(self.neuron_rates[name]))

    @property
    def network_rate(self) -> float:
        """Activation-count-weighted mean firing rate over all spiking layers."""
        den = sum(self.neuron_sizes.values())
        if not den:
            return 0.0
        return float(sum(np.mean(r) * self.neuron_sizes[k] for k, r in self.neuron_rates.items()) / den)

    @property
    def total_ops(self) -> float:
        return float(sum(layer.ops for layer in self.layers))

    def to_json(self) -> dict:
        per_layer = [
            {"name": l.name, "s": l.s, "s_steps": l.s_steps, "A": l.A, "ops": l.ops, "energy_pj": l.energy_pj}
            for l in self.layers
        ]
        snn = self.total_ops * PJ_PER_ADD * 1e-12
        heads = self.head_macs * PJ_PER_MAC * 1e-12
        return {
            "per_layer": per_layer,
            "firing_rates": {k: float(np.mean(v)) for k, v in self.neuron_rates.items()},
            "totals": {
                "T": self.T,
                "ops": self.total_ops,
                "snn_energy_j": snn,
                "head_macs": self.head_macs,
                "head_energy_j": heads,
                "energy_j": snn + heads,
                "network_firing_rate": self.network_rate,
            },
        }


def record_firing(firing_record: dict, graph: NetworkGraph | None = None) -> FiringReport:
    """Build a report from a forward pass's record; with ``graph`` the per-conv
    operation counts and head MACs are filled in as well."""
    neurons = {k: [float(x) for x in v] for k, v in firing_record["neurons"].items()}
    T = max((len(v) for v in neurons.values()), default=0)
    report = FiringReport(T, neurons, dict(firing_record.get("neuron_sizes", {k: 1 for k in neurons})))
    if graph is not None:
        dense = dense_additions(graph)
        synapses = firing_record.get("synapses", {})
        report.layers = [LayerCost(name, [float(x) for x in synapses.get(name, [0.0] * T)], A)
                         for name, A in dense.items()]
        report.head_macs = sum(head_macs(graph).values())
    return report


def conv_additions(cin: int, cout: int, kernel: int, out_hw: tuple[int, int]) -> int:
    return cout * out_hw[0] * out_hw[1] * cin * kernel * kernel


def dense_additions(graph: NetworkGraph) -> dict[str, int]:
    """Per spiking conv layer: accumulations per sample per step at full input density."""
    return {
        m.name: conv_additions(m.in_channels, m.out_channels, m.kernel, m.out_hw)
        for m in graph.modules() if isinstance(m, ConvBN)
    }


def head_macs(graph: NetworkGraph) -> dict[str, int]:
    """MACs of the real-valued 1x1 prediction convs (evaluated once, at the final step)."""
    return {
        head.name: conv_additions(head.pred.in_channels, head.pred.out_channels, 1, head.hw)
        for head in graph.heads
    }


def energy_from_counts(additions: float, macs: float = 0.0) -> float:
    return (additions * PJ_PER_ADD + macs * PJ_PER_MAC) * 1e-12


def energy_estimate(report: FiringReport) -> float:
    """Joules: sum of s*T*A*0.9 pJ over layers plus head MACs at 4.6 pJ."""
    return energy_from_counts(report.total_ops, report.head_macs)


def write_report(report: FiringReport, json_path=None, csv_path=None) -> dict:
    data = report.to_json()
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "s", "A", "ops", "energy_pj"])
            for row in data["per_layer"]:
                w.writerow([row["name"], f"{row['s']:.6f}", row["A"], f"{row['ops']:.1f}", f"{row['energy_pj']:.1f}"])
    return data
