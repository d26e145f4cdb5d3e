"""Netlist simplification passes and random-simulation equivalence checking.

simplify() runs three rewrites to a fixpoint: constant folding with local
gate identities, structural hashing (shared logic within and across
pipeline stages), then dead-gate elimination, and finally rebuilds the
netlist with dense, deterministic net numbering. All rewrites are
cycle-exact: simulation of the result matches the input netlist on every
cycle including the reset transient.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .netlist import (
    AND2,
    BUF,
    CONST0,
    CONST1,
    COMMUTATIVE,
    INV,
    MUX2,
    NAND2,
    OR2,
    XNOR2,
    XOR2,
    Cell,
    FlipFlop,
    Netlist,
    NetlistError,
    simulate_packed,
    unpack_lane,
)


def _find(alias: list[int], x: int) -> int:
    root = x
    while alias[root] != root:
        root = alias[root]
    while alias[x] != root:  # path compression
        alias[x], x = root, alias[x]
    return root


def simplify(n: Netlist) -> Netlist:
    """Return an output-equivalent netlist with redundant logic removed."""
    alias = list(range(n.n_nets))
    cells: list[Cell | None] = list(n.cells)
    stages = list(n.stages)
    flops: list[FlipFlop | None] = list(n.flops)
    flop_stages = list(n.flop_stages)

    changed = True
    while changed:
        changed = False
        seen: dict[tuple, int] = {}
        inv_src: dict[int, int] = {}  # INV output -> its input
        inv_of: dict[int, int] = {}  # input -> INV output
        for idx, cell in enumerate(cells):
            if cell is None:
                continue
            kind = cell.kind
            ins = tuple(_find(alias, i) for i in cell.ins)
            target = -1
            if kind == BUF:
                target = ins[0]
            elif kind == INV:
                a = ins[0]
                if a == CONST0:
                    target = CONST1
                elif a == CONST1:
                    target = CONST0
                elif a in inv_src:
                    target = inv_src[a]
            elif kind == MUX2:
                d0, d1, s = ins
                if s == CONST0 or d0 == d1:
                    target = d0
                elif s == CONST1:
                    target = d1
                elif d0 == CONST0 and d1 == CONST1:
                    target = s
                elif d0 == CONST1 and d1 == CONST0:
                    kind, ins = INV, (s,)
                elif d0 == CONST0 or d0 == s:
                    kind, ins = AND2, (d1, s)
                elif d1 == CONST1 or d1 == s:
                    kind, ins = OR2, (d0, s)
                elif inv_of.get(d0) == d1 or inv_of.get(d1) == d0:
                    kind, ins = XOR2, (d0, s)
                elif inv_of.get(s) == d0:
                    kind, ins = OR2, (d0, d1)
                elif inv_of.get(s) == d1:
                    kind, ins = AND2, (d0, d1)
            else:
                a, b = ins
                comp = inv_of.get(a) == b or inv_of.get(b) == a
                if kind == AND2:
                    if a == CONST0 or b == CONST0 or comp:
                        target = CONST0
                    elif a == CONST1 or a == b:
                        target = b
                    elif b == CONST1:
                        target = a
                elif kind == OR2:
                    if a == CONST1 or b == CONST1 or comp:
                        target = CONST1
                    elif a == CONST0 or a == b:
                        target = b
                    elif b == CONST0:
                        target = a
                elif kind == XOR2:
                    if a == b:
                        target = CONST0
                    elif comp:
                        target = CONST1
                    elif a == CONST0:
                        target = b
                    elif b == CONST0:
                        target = a
                    elif a == CONST1:
                        kind, ins = INV, (b,)
                    elif b == CONST1:
                        kind, ins = INV, (a,)
                elif kind == XNOR2:
                    if a == b:
                        target = CONST1
                    elif comp:
                        target = CONST0
                    elif a == CONST1:
                        target = b
                    elif b == CONST1:
                        target = a
                    elif a == CONST0:
                        kind, ins = INV, (b,)
                    elif b == CONST0:
                        kind, ins = INV, (a,)
                elif kind == NAND2:
                    if a == CONST0 or b == CONST0 or comp:
                        target = CONST1
                    elif a == CONST1 or a == b:
                        kind, ins = INV, (b,)
                    elif b == CONST1:
                        kind, ins = INV, (a,)
                else:  # NOR2
                    if a == CONST1 or b == CONST1 or comp:
                        target = CONST0
                    elif a == CONST0 or a == b:
                        kind, ins = INV, (b,)
                    elif b == CONST0:
                        kind, ins = INV, (a,)

            if target >= 0:
                alias[cell.out] = target
                cells[idx] = None
                changed = True
                continue
            key = (kind, tuple(sorted(ins)) if kind in COMMUTATIVE else ins)
            prev = seen.get(key)
            if prev is not None:
                alias[cell.out] = prev
                cells[idx] = None
                changed = True
                continue
            seen[key] = cell.out
            if kind != cell.kind:
                changed = True
            if kind != cell.kind or ins != cell.ins:
                cells[idx] = Cell(kind, ins, cell.out)
            if kind == INV:
                inv_src[cell.out] = ins[0]
                inv_of[ins[0]] = cell.out

        # Flops: a D tied to constant 0 reproduces the reset value forever,
        # and flops sharing a D net are interchangeable (all reset to 0).
        flop_seen: dict[int, int] = {}
        for idx, ff in enumerate(flops):
            if ff is None:
                continue
            d = _find(alias, ff.d)
            if d == CONST0:
                alias[ff.q] = CONST0
                flops[idx] = None
                changed = True
                continue
            prev = flop_seen.get(d)
            if prev is not None:
                alias[ff.q] = prev
                flops[idx] = None
                changed = True
                continue
            flop_seen[d] = ff.q
            if d != ff.d:
                flops[idx] = FlipFlop(d, ff.q)

    return _sweep_and_rebuild(n, alias, cells, stages, flops, flop_stages)


def _sweep_and_rebuild(n, alias, cells, stages, flops, flop_stages) -> Netlist:
    """Dead-gate elimination plus dense renumbering into a fresh netlist."""
    live: set[int] = set()
    for nets in n.outputs.values():
        live.update(_find(alias, x) for x in nets)
    kept_cells = [(c, st) for c, st in zip(cells, stages) if c is not None]
    kept_flops = [(f, st) for f, st in zip(flops, flop_stages) if f is not None]

    pending = True
    while pending:
        pending = False
        for c, _ in reversed(kept_cells):
            if c.out in live:
                for i in c.ins:
                    if i not in live:
                        live.add(i)
        for f, _ in kept_flops:
            if f.q in live:
                d = f.d
                if d not in live:
                    live.add(d)
                    pending = True  # may open a new combinational cone

    kept_cells = [(c, st) for c, st in kept_cells if c.out in live]
    kept_flops = [(f, st) for f, st in kept_flops if f.q in live]

    out = Netlist(n.name)
    remap = {CONST0: CONST0, CONST1: CONST1}
    next_id = 2

    def fresh(old: int) -> int:
        nonlocal next_id
        new = remap.get(old)
        if new is None:
            new = remap[old] = next_id
            next_id += 1
        return new

    for name, nets in n.inputs.items():
        out.inputs[name] = tuple(fresh(x) for x in nets)
    for f, _ in kept_flops:
        fresh(f.q)
    for c, _ in kept_cells:
        fresh(c.out)
    out.n_nets = next_id

    def ref(old: int) -> int:
        return remap[_find(alias, old)]

    for c, st in kept_cells:
        out.cells.append(Cell(c.kind, tuple(ref(i) for i in c.ins), remap[c.out]))
        out.stages.append(st)
    for f, st in kept_flops:
        out.flops.append(FlipFlop(ref(f.d), remap[f.q]))
        out.flop_stages.append(st)
    for name, nets in n.outputs.items():
        out.outputs[name] = tuple(ref(x) for x in nets)
    out.latency = n.latency
    out.meta = dict(n.meta)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Sequential equivalence by random simulation


@dataclass
class Counterexample:
    cycle: int  # compare index: b's cycle; a's is cycle + latency_offset
    bus: str
    value_a: int
    value_b: int
    stream: list  # scalar input assignments replaying the failure on a


@dataclass
class EquivResult:
    equivalent: bool
    counterexample: Counterexample | None = None
    vectors: int = 0

    def __bool__(self) -> bool:
        return self.equivalent


def check_equiv(
    a: Netlist,
    b: Netlist,
    latency_offset: int = 0,
    trials: int = 10_000,
    warmup: int = 0,
    seed: int = 2024,
) -> EquivResult:
    """Drive both netlists with identical random streams and compare
    a's outputs at cycle t + latency_offset against b's at cycle t,
    skipping the first `warmup` comparisons."""
    if a.bus_signature() != b.bus_signature():
        raise NetlistError("bus signatures differ")
    lanes = min(trials, 2048)
    per_lane = -(-trials // lanes)  # ceil
    cycles_b = warmup + per_lane
    cycles_a = cycles_b + latency_offset
    rng = random.Random(seed)
    stream = []
    for _ in range(cycles_a):
        assign = {}
        for name, nets in sorted(a.inputs.items()):
            assign[name] = [rng.getrandbits(lanes) for _ in nets]
        stream.append(assign)
    rec_a = simulate_packed(a, stream, lanes)
    rec_b = simulate_packed(b, stream[:cycles_b], lanes)
    compared = 0
    for t in range(warmup, cycles_b):
        ra, rb = rec_a[t + latency_offset], rec_b[t]
        for bus in sorted(a.outputs):
            wa, wb = ra[bus], rb[bus]
            diff = 0
            for x, y in zip(wa, wb):
                diff |= x ^ y
            if diff:
                lane = (diff & -diff).bit_length() - 1
                replay = [
                    {name: unpack_lane(words, lane) for name, words in assign.items()}
                    for assign in stream[: t + latency_offset + 1]
                ]
                return EquivResult(
                    False,
                    Counterexample(
                        cycle=t,
                        bus=bus,
                        value_a=unpack_lane(wa, lane),
                        value_b=unpack_lane(wb, lane),
                        stream=replay,
                    ),
                    vectors=compared,
                )
        compared += lanes
    return EquivResult(True, None, vectors=compared)


__all__ = [
    "simplify",
    "check_equiv",
    "EquivResult",
    "Counterexample",
]
