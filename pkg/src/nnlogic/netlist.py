"""Gate-level sequential circuit IR and a levelized cycle-accurate simulator.

Nets are dense integer ids. Net 0 and net 1 are the constant-0 and
constant-1 nets of every netlist. Cells are stored in construction order,
which is always a valid topological order because a cell's inputs must
exist before the cell is added; the simulator and all passes rely on this.

The simulator is bit-parallel: every net value is a Python int whose bit k
carries the value of independent simulation lane k, so one pass over the
cells evaluates up to thousands of input vectors at once.
"""

from __future__ import annotations

import json
from typing import Iterable, NamedTuple

# Cell kind codes. Order is fixed; cost/delay tables index by these names.
INV, BUF, AND2, OR2, NAND2, NOR2, XOR2, XNOR2, MUX2 = range(9)
KIND_NAMES = ("INV", "BUF", "AND2", "OR2", "NAND2", "NOR2", "XOR2", "XNOR2", "MUX2")
KIND_CODES = {name: code for code, name in enumerate(KIND_NAMES)}
KIND_ARITY = (1, 1, 2, 2, 2, 2, 2, 2, 3)
# Kinds whose inputs commute (MUX2 select is positional, so it is excluded).
COMMUTATIVE = frozenset((AND2, OR2, NAND2, NOR2, XOR2, XNOR2))

CONST0 = 0
CONST1 = 1


class NetlistError(ValueError):
    """Structural violation: bad arity, undriven net, combinational cycle."""


class Cell(NamedTuple):
    kind: int
    ins: tuple[int, ...]
    out: int


class FlipFlop(NamedTuple):
    d: int
    q: int  # reset value is always 0


class Netlist:
    """Mutable while being built; passes never mutate, they rebuild.

    Buses map a name to a tuple of net ids, LSB first. `stages` and
    `flop_stages` tag each cell/flop with the pipeline stage (layer) that
    produced it, or -1. `latency` records the input-to-output pipeline
    depth in cycles when known. `meta` holds generator bookkeeping.
    """

    def __init__(self, name: str = "top"):
        self.name = name
        self.n_nets = 2  # nets 0/1 are the constants
        self.cells: list[Cell] = []
        self.flops: list[FlipFlop] = []
        self.inputs: dict[str, tuple[int, ...]] = {}
        self.outputs: dict[str, tuple[int, ...]] = {}
        self.stages: list[int] = []
        self.flop_stages: list[int] = []
        self.latency: int | None = None
        self.meta: dict = {}

    # -- construction -------------------------------------------------

    def new_net(self) -> int:
        n = self.n_nets
        self.n_nets += 1
        return n

    def add_cell(self, kind: int, ins: Iterable[int], stage: int = -1) -> int:
        ins = tuple(ins)
        if len(ins) != KIND_ARITY[kind]:
            raise NetlistError(f"{KIND_NAMES[kind]} expects {KIND_ARITY[kind]} inputs")
        for i in ins:
            if not 0 <= i < self.n_nets:
                raise NetlistError(f"input net {i} does not exist")
        out = self.new_net()
        self.cells.append(Cell(kind, ins, out))
        self.stages.append(stage)
        return out

    def add_flop(self, d: int, stage: int = -1) -> int:
        if not 0 <= d < self.n_nets:
            raise NetlistError(f"flop D net {d} does not exist")
        q = self.new_net()
        self.flops.append(FlipFlop(d, q))
        self.flop_stages.append(stage)
        return q

    def add_input_bus(self, name: str, width: int) -> tuple[int, ...]:
        if width <= 0:
            raise NetlistError("bus width must be positive")
        if name in self.inputs:
            raise NetlistError(f"duplicate input bus {name!r}")
        nets = tuple(self.new_net() for _ in range(width))
        self.inputs[name] = nets
        return nets

    def set_output_bus(self, name: str, nets: Iterable[int]) -> None:
        nets = tuple(nets)
        if not nets:
            raise NetlistError("bus width must be positive")
        for n in nets:
            if not 0 <= n < self.n_nets:
                raise NetlistError(f"output net {n} does not exist")
        self.outputs[name] = nets

    # -- structure queries ---------------------------------------------

    def drivers(self) -> list[tuple[str, int]]:
        """Per-net driver table; raises if any net has zero or two drivers."""
        drv: list[tuple[str, int] | None] = [None] * self.n_nets
        drv[CONST0] = ("const", 0)
        drv[CONST1] = ("const", 1)
        for name, nets in self.inputs.items():
            for n in nets:
                if drv[n] is not None:
                    raise NetlistError(f"net {n} multiply driven (input {name!r})")
                drv[n] = ("input", n)
        for i, ff in enumerate(self.flops):
            if drv[ff.q] is not None:
                raise NetlistError(f"net {ff.q} multiply driven (flop {i})")
            drv[ff.q] = ("flop", i)
        for i, c in enumerate(self.cells):
            if drv[c.out] is not None:
                raise NetlistError(f"net {c.out} multiply driven (cell {i})")
            drv[c.out] = ("cell", i)
        for n, d in enumerate(drv):
            if d is None:
                drv[n] = ("undriven", n)
        return drv  # type: ignore[return-value]

    def validate(self) -> None:
        """Checks single drivers, driven outputs, and topological cell order."""
        drv = self.drivers()
        seen = [False] * self.n_nets
        seen[CONST0] = seen[CONST1] = True
        for nets in self.inputs.values():
            for n in nets:
                seen[n] = True
        for ff in self.flops:
            seen[ff.q] = True
        for c in self.cells:
            for i in c.ins:
                if not seen[i] and drv[i][0] == "cell":
                    raise NetlistError(f"cell order is not topological at net {i}")
            seen[c.out] = True
        for name, nets in self.outputs.items():
            for n in nets:
                if drv[n][0] == "undriven":
                    raise NetlistError(f"output {name!r} has undriven net {n}")
        for ff in self.flops:
            if drv[ff.d][0] == "undriven":
                raise NetlistError(f"flop D net {ff.d} is undriven")

    def depth(self) -> int:
        """Longest combinational path in cell units."""
        level = [0] * self.n_nets
        best = 0
        for c in self.cells:
            lv = 1 + max(level[i] for i in c.ins)
            level[c.out] = lv
            if lv > best:
                best = lv
        return best

    def stats(self) -> dict:
        counts = {name: 0 for name in KIND_NAMES}
        for c in self.cells:
            counts[KIND_NAMES[c.kind]] += 1
        return {
            "cells": counts,
            "total_cells": len(self.cells),
            "flops": len(self.flops),
            "nets": self.n_nets,
            "depth": self.depth(),
        }

    def stage_count(self) -> int:
        tags = {s for s in self.flop_stages if s >= 0}
        return len(tags)

    def copy(self) -> "Netlist":
        n = Netlist(self.name)
        n.n_nets = self.n_nets
        n.cells = list(self.cells)
        n.flops = list(self.flops)
        n.inputs = dict(self.inputs)
        n.outputs = dict(self.outputs)
        n.stages = list(self.stages)
        n.flop_stages = list(self.flop_stages)
        n.latency = self.latency
        n.meta = dict(self.meta)
        return n

    def bus_signature(self) -> tuple:
        ins = tuple((k, len(v)) for k, v in sorted(self.inputs.items()))
        outs = tuple((k, len(v)) for k, v in sorted(self.outputs.items()))
        return ins, outs


# ---------------------------------------------------------------------------
# Simulation


def _check_assignment(n: Netlist, assign: dict) -> None:
    missing = set(n.inputs) - set(assign)
    if missing:
        raise NetlistError(f"unassigned input buses: {sorted(missing)}")
    unknown = set(assign) - set(n.inputs)
    if unknown:
        raise NetlistError(f"unknown input buses: {sorted(unknown)}")


def _check_combinational_order(n: Netlist) -> None:
    """Every cell input must be driven before the cell runs; a violation
    means a forward reference, i.e. a combinational cycle (or a corrupt
    netlist), which levelized evaluation cannot handle."""
    ready = bytearray(n.n_nets)
    ready[CONST0] = ready[CONST1] = 1
    for nets in n.inputs.values():
        for x in nets:
            ready[x] = 1
    for ff in n.flops:
        ready[ff.q] = 1
    for c in n.cells:
        for i in c.ins:
            if not ready[i]:
                raise NetlistError(
                    f"combinational cycle or undriven net {i} feeding cell {c.out}"
                )
        ready[c.out] = 1


def simulate_packed(n: Netlist, stream: list[dict[str, list[int]]], lanes: int):
    """Cycle-accurate simulation of `lanes` independent input streams.

    Each assignment maps a bus name to per-bit words (LSB-first); bit k of
    a word is the bit value in lane k. Flops start at 0, combinational
    cells are evaluated in construction order (topological), then all
    flops update simultaneously. Returns one packed output record per
    cycle.
    """
    _check_combinational_order(n)
    mask = (1 << lanes) - 1
    vals = [0] * n.n_nets
    vals[CONST1] = mask
    prog = n.cells
    flops = n.flops
    for ff in flops:
        vals[ff.q] = 0
    out_buses = list(n.outputs.items())
    records = []
    for assign in stream:
        _check_assignment(n, assign)
        for name, words in assign.items():
            nets = n.inputs[name]
            if len(words) != len(nets):
                raise NetlistError(f"bus {name!r} expects {len(nets)} words")
            for net, word in zip(nets, words):
                vals[net] = word & mask
        for kind, ins, out in prog:
            if kind == XOR2:
                vals[out] = vals[ins[0]] ^ vals[ins[1]]
            elif kind == AND2:
                vals[out] = vals[ins[0]] & vals[ins[1]]
            elif kind == OR2:
                vals[out] = vals[ins[0]] | vals[ins[1]]
            elif kind == INV:
                vals[out] = vals[ins[0]] ^ mask
            elif kind == MUX2:
                d0 = vals[ins[0]]
                vals[out] = d0 ^ ((d0 ^ vals[ins[1]]) & vals[ins[2]])
            elif kind == NAND2:
                vals[out] = (vals[ins[0]] & vals[ins[1]]) ^ mask
            elif kind == NOR2:
                vals[out] = (vals[ins[0]] | vals[ins[1]]) ^ mask
            elif kind == XNOR2:
                vals[out] = vals[ins[0]] ^ vals[ins[1]] ^ mask
            else:  # BUF
                vals[out] = vals[ins[0]]
        records.append({name: [vals[b] for b in nets] for name, nets in out_buses})
        if flops:
            nd = [vals[ff.d] for ff in flops]
            for ff, v in zip(flops, nd):
                vals[ff.q] = v
    return records


def simulate(n: Netlist, stream) -> list[dict[str, int]]:
    """Single-stream simulation; bus values are unsigned ints, LSB first."""
    packed = []
    for assign in stream:
        _check_assignment(n, assign)
        rec = {}
        for name, value in assign.items():
            nets = n.inputs[name]
            rec[name] = [(int(value) >> b) & 1 for b in range(len(nets))]
        packed.append(rec)
    out = []
    for rec in simulate_packed(n, packed, lanes=1):
        out.append(
            {name: sum(bit << i for i, bit in enumerate(words)) for name, words in rec.items()}
        )
    return out


def encode_signed(v: int, width: int) -> int:
    """Two's-complement bit pattern of v in the given width."""
    return v & ((1 << width) - 1)


def decode_signed(bits: int, width: int) -> int:
    if bits & (1 << (width - 1)):
        return bits - (1 << width)
    return bits


def pack_vectors(values: list[int], width: int) -> list[int]:
    """Pack one signed value per lane into per-bit words (LSB first)."""
    words = [0] * width
    for lane, v in enumerate(values):
        bits = encode_signed(v, width)
        for b in range(width):
            if (bits >> b) & 1:
                words[b] |= 1 << lane
    return words


def unpack_lane(words: list[int], lane: int) -> int:
    return sum(((w >> lane) & 1) << b for b, w in enumerate(words))


# ---------------------------------------------------------------------------
# JSON dump/restore (debugging and the compile/verify handoff)


def netlist_to_json(n: Netlist) -> dict:
    return {
        "name": n.name,
        "n_nets": n.n_nets,
        "cells": [[KIND_NAMES[c.kind], list(c.ins), c.out] for c in n.cells],
        "flops": [[ff.d, ff.q] for ff in n.flops],
        "inputs": {k: list(v) for k, v in n.inputs.items()},
        "outputs": {k: list(v) for k, v in n.outputs.items()},
        "stages": n.stages,
        "flop_stages": n.flop_stages,
        "latency": n.latency,
        "meta": n.meta,
    }


def netlist_from_json(doc: dict) -> Netlist:
    try:
        n = Netlist(doc.get("name", "top"))
        n.n_nets = int(doc["n_nets"])
        n.cells = [Cell(KIND_CODES[k], tuple(ins), out) for k, ins, out in doc["cells"]]
        n.flops = [FlipFlop(d, q) for d, q in doc["flops"]]
        n.inputs = {k: tuple(v) for k, v in doc["inputs"].items()}
        n.outputs = {k: tuple(v) for k, v in doc["outputs"].items()}
        n.stages = list(doc.get("stages", [-1] * len(n.cells)))
        n.flop_stages = list(doc.get("flop_stages", [-1] * len(n.flops)))
        n.latency = doc.get("latency")
        n.meta = dict(doc.get("meta", {}))
    except (KeyError, TypeError, ValueError) as e:
        raise NetlistError(f"malformed netlist document: {e!r}") from e
    n.validate()
    return n


def save_netlist(n: Netlist, path) -> None:
    with open(path, "w") as f:
        json.dump(netlist_to_json(n), f)
        f.write("\n")


def load_netlist(path) -> Netlist:
    with open(path) as f:
        return netlist_from_json(json.load(f))
