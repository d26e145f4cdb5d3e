"""Transistor-count area estimation, toggle-based relative power, and the
weight-to-multiplier-area ranking table that drives hardware-aware training."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .netlist import KIND_NAMES, Netlist
from .synth import csd_encode, gen_const_mult

# Static-CMOS transistor counts for the primitive library.
DEFAULT_TRANSISTORS = {
    "INV": 2,
    "BUF": 4,
    "NAND2": 4,
    "NOR2": 4,
    "AND2": 6,
    "OR2": 6,
    "XOR2": 10,
    "XNOR2": 10,
    "MUX2": 12,
}
DFF_TRANSISTORS = 24


@dataclass(frozen=True)
class CostModel:
    """Per-kind transistor counts and toggle-energy weights.

    Toggle weights default to the transistor counts (switched capacitance
    scales with device count); the flop clock term charges every flop on
    every cycle. Primary-input nets are charged like a buffer driver.
    """

    transistors: dict = field(default_factory=lambda: dict(DEFAULT_TRANSISTORS))
    flop_transistors: int = DFF_TRANSISTORS
    toggle_weight: dict = field(default_factory=lambda: dict(DEFAULT_TRANSISTORS))
    flop_toggle_weight: float = DFF_TRANSISTORS
    flop_clock_energy: float = 6.0
    input_toggle_weight: float = 4.0

    def __post_init__(self):
        for table in (self.transistors, self.toggle_weight):
            for k, v in table.items():
                if v < 0:
                    raise ValueError(f"negative cost for {k}")
        if min(self.flop_transistors, self.flop_clock_energy, self.flop_toggle_weight) < 0:
            raise ValueError("negative flop cost")


def estimate_area(n: Netlist, c: CostModel | None = None) -> int:
    """Total transistors: cells by kind plus flops."""
    c = c or CostModel()
    area = len(n.flops) * c.flop_transistors
    for cell in n.cells:
        area += c.transistors[KIND_NAMES[cell.kind]]
    return area


def count_toggles(n: Netlist, stimulus, warmup: int = 0) -> list[int]:
    """Per-net count of value changes between consecutive cycles.

    The first `warmup` transitions (reset transient) are skipped.
    """
    toggles = [0] * n.n_nets
    prev: list[int] | None = None
    seen = 0

    def on_cycle(vals):
        nonlocal prev, seen
        if prev is not None:
            seen += 1
            if seen > warmup:
                for net in range(2, n.n_nets):
                    if prev[net] != vals[net]:
                        toggles[net] += 1
        prev = list(vals)

    _simulate_with_trace(n, stimulus, on_cycle)
    return toggles


def estimate_power(n: Netlist, stimulus, c: CostModel | None = None,
                   warmup: int = 0) -> float:
    """Relative dynamic power over an input stream.

    power = sum over nets of toggles * weight(driving kind) * (1 + fanout)
    divided by the observed cycle count, plus the flop clock energy term.
    Unitless. `warmup` drops the reset transient so a settled constant
    stimulus shows zero dynamic power.
    """
    c = c or CostModel()
    if not stimulus:
        raise ValueError("stimulus must be non-empty")
    if warmup >= len(stimulus):
        raise ValueError("warmup swallows the whole stimulus")
    weight = [0.0] * n.n_nets
    for nets in n.inputs.values():
        for x in nets:
            weight[x] = c.input_toggle_weight
    for ff in n.flops:
        weight[ff.q] = c.flop_toggle_weight
    for cell in n.cells:
        weight[cell.out] = c.toggle_weight[KIND_NAMES[cell.kind]]
    fanout = [0] * n.n_nets
    for cell in n.cells:
        for i in cell.ins:
            fanout[i] += 1
    for ff in n.flops:
        fanout[ff.d] += 1
    for nets in n.outputs.values():
        for x in nets:
            fanout[x] += 1

    toggles = count_toggles(n, stimulus, warmup=warmup)
    cycles = len(stimulus) - warmup
    dynamic = sum(
        t * weight[net] * (1 + fanout[net]) for net, t in enumerate(toggles) if t
    )
    return dynamic / cycles + c.flop_clock_energy * len(n.flops)


def _simulate_with_trace(n: Netlist, stimulus, on_cycle) -> None:
    """Scalar simulation that exposes the full value vector each cycle."""
    from .netlist import CONST1

    packed = []
    for assign in stimulus:
        rec = {}
        for name, value in assign.items():
            nets = n.inputs[name]
            rec[name] = [(int(value) >> b) & 1 for b in range(len(nets))]
        packed.append(rec)
    # Re-run simulate_packed per prefix would be quadratic; instead inline
    # a single-lane evaluation mirroring netlist.simulate_packed.
    vals = [0] * n.n_nets
    vals[CONST1] = 1
    for ff in n.flops:
        vals[ff.q] = 0
    for assign in packed:
        for name, words in assign.items():
            for net, word in zip(n.inputs[name], words):
                vals[net] = word & 1
        for kind, ins, out in n.cells:
            a = vals[ins[0]]
            if kind == 0:  # INV
                vals[out] = a ^ 1
            elif kind == 1:  # BUF
                vals[out] = a
            elif kind == 2:  # AND2
                vals[out] = a & vals[ins[1]]
            elif kind == 3:  # OR2
                vals[out] = a | vals[ins[1]]
            elif kind == 4:  # NAND2
                vals[out] = (a & vals[ins[1]]) ^ 1
            elif kind == 5:  # NOR2
                vals[out] = (a | vals[ins[1]]) ^ 1
            elif kind == 6:  # XOR2
                vals[out] = a ^ vals[ins[1]]
            elif kind == 7:  # XNOR2
                vals[out] = a ^ vals[ins[1]] ^ 1
            else:  # MUX2
                vals[out] = vals[ins[1]] if vals[ins[2]] else a
        on_cycle(vals)
        if n.flops:
            nd = [vals[ff.d] for ff in n.flops]
            for ff, v in zip(n.flops, nd):
                vals[ff.q] = v


# ---------------------------------------------------------------------------
# Weight-area ranking


@dataclass(frozen=True)
class WeightAreaTable:
    """Multiplier area for each signed 8-bit weight, cheapest first."""

    areas: dict  # weight -> transistor count of the simplified multiplier
    order: tuple  # all 256 weights sorted by (area, |w|, negative first)

    def area(self, w: int) -> int:
        return self.areas[w]

    def rank(self, w: int) -> int:
        return self.order.index(w)


def rank_weight_areas(cost: CostModel | None = None, in_width: int = 8) -> WeightAreaTable:
    """Build and measure the simplified constant multiplier for every weight.

    The area of a weight is the area of the block actually generated for
    it; there is no separate formula that could drift out of sync.
    """
    cost = cost or CostModel()
    areas = {}
    for w in range(-128, 128):
        areas[w] = estimate_area(gen_const_mult(w, in_width).netlist, cost)
    order = tuple(sorted(areas, key=lambda w: (areas[w], abs(w), w > 0)))
    return WeightAreaTable(areas=areas, order=order)


def select_top_n(table: WeightAreaTable, n: int) -> frozenset:
    """The n cheapest weights; 0 is always included."""
    if not 1 <= n <= 256:
        raise ValueError("n must be in [1, 256]")
    chosen = list(table.order[:n])
    if 0 not in chosen:
        chosen[-1] = 0  # displace the most expensive pick
    return frozenset(chosen)


def weight_table_to_csv(table: WeightAreaTable, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["weight", "area", "rank", "csd_digits"])
        for rank, w in enumerate(table.order):
            writer.writerow([w, table.areas[w], rank, len(csd_encode(w))])
