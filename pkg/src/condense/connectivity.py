"""Connectivity strength export: who actually feeds whom after learning.

For each dense layer, every (input feature map, filter group) pair gets
the mean absolute unmasked 1x1 weight connecting them; pruned pairs are
exactly 0. A producer-level matrix aggregates those per-feature
strengths over each source's channel range (the stem or an earlier
layer) for every target layer and for the classifier.

The text format is tab-separated with '#' comment lines, two sections:

    # per-feature
    <layer>\t<group>\t<s_0>\t...\t<s_{R-1}>
    # per-block
    <producer>\t<v_layer0>\t...\t<v_layerL-1>\t<v_classifier>
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import LgcNet
from .errors import DataError


@dataclass
class ConnectivityReport:
    # feature_strengths[i]: [R_i, G] array for dense layer i
    feature_strengths: list[np.ndarray]
    # block_matrix: [n_producers, n_layers + 1]; last column = classifier
    block_matrix: np.ndarray
    producer_channels: list[int]

    @property
    def n_layers(self) -> int:
        return len(self.feature_strengths)


def export_connectivity(model: LgcNet) -> ConnectivityReport:
    graph = model.graph
    feature = []
    for layer in model.layers:
        lgc = layer.lgc
        og = lgc.rows_per_group
        cols = []
        for g in range(lgc.groups):
            rows = lgc._group_rows(g)
            cols.append(np.abs(lgc.filter.data[rows] * lgc.mask[rows]).mean(axis=0))
        feature.append(np.stack(cols, axis=1))  # [R, G]

    n_prod = len(graph.producers)
    n_layers = len(graph.nodes)
    block = np.zeros((n_prod, n_layers + 1))
    for i, node in enumerate(graph.nodes):
        per = feature[i]
        for src, lo, hi in graph.input_ranges(i):
            block[src, i] = per[lo:hi].mean()

    fc = model.classifier
    w = np.abs(fc.weight.data * fc.mask) if fc.prunable else np.abs(fc.weight.data)
    col_strength = w.mean(axis=0)
    for src, lo, hi in graph.input_ranges(n_layers):
        block[src, n_layers] = col_strength[lo:hi].mean()

    channels = [p.channels for p in graph.producers]
    return ConnectivityReport(feature, block, channels)


def write_connectivity(report: ConnectivityReport, path: str | Path) -> Path:
    path = Path(path)
    lines = ["# connectivity export v1",
             "# per-feature: layer, group, strength per input channel"]
    for i, mat in enumerate(report.feature_strengths):
        for g in range(mat.shape[1]):
            vals = "\t".join(f"{v:.8g}" for v in mat[:, g])
            lines.append(f"{i}\t{g}\t{vals}")
    lines.append("# per-block: producer, strength per target layer, classifier last")
    for p in range(report.block_matrix.shape[0]):
        vals = "\t".join(f"{v:.8g}" for v in report.block_matrix[p])
        lines.append(f"{p}\t{vals}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_connectivity(path: str | Path) -> ConnectivityReport:
    """Parse a file written by write_connectivity (used for round-trip
    verification; producer channel counts are not stored, so that field
    comes back empty)."""
    path = Path(path)
    per_feature: dict[int, dict[int, np.ndarray]] = {}
    block_rows: list[np.ndarray] = []
    section = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith("#"):
            if "per-feature" in line:
                section = "feature"
            elif "per-block" in line:
                section = "block"
            continue
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            if section == "feature":
                layer, group = int(parts[0]), int(parts[1])
                per_feature.setdefault(layer, {})[group] = np.array(
                    [float(v) for v in parts[2:]]
                )
            elif section == "block":
                block_rows.append(np.array([float(v) for v in parts[1:]]))
            else:
                raise ValueError("data before any section header")
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    feats = []
    for layer in sorted(per_feature):
        groups = per_feature[layer]
        feats.append(np.stack([groups[g] for g in sorted(groups)], axis=1))
    return ConnectivityReport(feats, np.stack(block_rows), [])
