"""Parameter and FLOP accounting.

Per conv: params = J * k^2 * K and flops = H_out * W_out * params.  Fully
connected heads count J * K for both.  BN, activations, pooling and biases
are not counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from calpa.arch.graph import ArchGraph


@dataclass(frozen=True)
class CostRow:
    id: str
    kind: str
    params: int
    flops: int


@dataclass(frozen=True)
class CostReport:
    rows: tuple[CostRow, ...]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def conv_params(self) -> int:
        return sum(r.params for r in self.rows if r.kind != "fully_connected")

    @property
    def conv_flops(self) -> int:
        return sum(r.flops for r in self.rows if r.kind != "fully_connected")

    def row(self, layer_id: str) -> CostRow:
        for r in self.rows:
            if r.id == layer_id:
                return r
        raise KeyError(layer_id)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "kind", "params", "flops"])
        for r in self.rows:
            w.writerow([r.id, r.kind, r.params, r.flops])
        w.writerow(["TOTAL", "", self.total_params, self.total_flops])
        return buf.getvalue()


def cost_report(graph: ArchGraph) -> CostReport:
    rows = []
    for layer in graph.layers:
        if layer.is_conv:
            params = layer.in_channels * layer.kernel * layer.kernel * layer.out_channels
            flops = layer.out_height * layer.out_width * params
        elif layer.kind == "fully_connected":
            params = flops = layer.in_channels * layer.out_channels
        else:
            continue
        rows.append(CostRow(layer.id, layer.kind, params, flops))
    return CostReport(tuple(rows))


def cost_ratio(before: CostReport, after: CostReport) -> tuple[float, float]:
    """Shrunken-to-original ratios in percent: ``(params %, flops %)``."""
    return (
        100.0 * after.total_params / before.total_params,
        100.0 * after.total_flops / before.total_flops,
    )


def sci(value: float, exponent: int, digits: int = 2) -> str:
    """Format as a fixed-exponent mantissa, e.g. ``477.06x10^4``."""
    return f"{value / 10 ** exponent:.{digits}f}x10^{exponent}"
