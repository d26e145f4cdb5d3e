"""Shared fixtures: random netlist generators and independent timing oracles.

The oracles here deliberately re-derive everything from the netlist with
their own graph extraction and their own algorithms (exhaustive placement
for chains, all-pairs register/delay matrices plus difference constraints
for DAGs), so they share no code path with the passes they check.
"""

from __future__ import annotations

import itertools
import random

import numpy as np
import pytest

from nnlogic.netlist import (
    AND2,
    INV,
    KIND_ARITY,
    MUX2,
    OR2,
    XNOR2,
    XOR2,
    NAND2,
    NOR2,
    BUF,
    Netlist,
)
from nnlogic.timing import TimingModel

RANDOM_KINDS = (INV, BUF, AND2, OR2, NAND2, NOR2, XOR2, XNOR2, MUX2)


def build_chain(n_cells: int, end_ranks: int, source_flop: bool = True) -> Netlist:
    """PI -> (optional FF) -> INV chain -> `end_ranks` FFs -> PO."""
    nl = Netlist("chain")
    cur = nl.add_input_bus("a", 1)[0]
    if source_flop:
        cur = nl.add_flop(cur, stage=0)
    for _ in range(n_cells):
        cur = nl.add_cell(INV, (cur,), stage=0)
    for _ in range(end_ranks):
        cur = nl.add_flop(cur, stage=0)
    nl.set_output_bus("z", (cur,))
    nl.latency = end_ranks + (1 if source_flop else 0)
    return nl


def random_pipeline(seed: int, groups: int = 3, cells_per_group: int = 20,
                    bus_width: int = 4) -> Netlist:
    """Random feed-forward netlist: combinational groups separated by
    flop ranks, with at least one output rank."""
    rng = random.Random(seed)
    nl = Netlist(f"rand{seed}")
    frontier = list(nl.add_input_bus("a", bus_width))
    for g in range(groups):
        pool = list(frontier)
        for _ in range(cells_per_group):
            kind = rng.choice(RANDOM_KINDS)
            ins = tuple(rng.choice(pool) for _ in range(KIND_ARITY[kind]))
            pool.append(nl.add_cell(kind, ins, stage=g))
        rank_src = [rng.choice(pool[-cells_per_group:]) for _ in range(bus_width)]
        frontier = [nl.add_flop(d, stage=g) for d in rank_src]
    nl.set_output_bus("z", tuple(frontier))
    nl.latency = groups
    return nl


# ---------------------------------------------------------------------------
# Independent retiming oracles


def chain_exhaustive_min_period(n_cells: int, total_regs: int, t: TimingModel,
                                cell_delay: float = 1.0) -> float:
    """Minimum period of a unit chain by literal register placement.

    Tries every way of placing all movable registers on the n_cells + 1
    stage boundaries (registers may stack); the period is the longest
    inter-register segment plus the flop overhead.
    """
    best = None
    boundaries = n_cells + 1
    for placement in itertools.combinations_with_replacement(
        range(boundaries), total_regs
    ):
        cuts = sorted(placement)
        segments = []
        prev = 0
        for cut in cuts:
            segments.append(cut - prev)
            prev = cut
        segments.append(n_cells - prev)
        period = t.clk_to_q + max(segments) * cell_delay + t.setup
        if best is None or period < best:
            best = period
    return best


def _trace_graph(n: Netlist, t: TimingModel):
    """Independent netlist -> retiming-graph extraction (host = C)."""
    C = len(n.cells)
    drv = {0: ("const", 0), 1: ("const", 1)}
    for nets in n.inputs.values():
        for x in nets:
            drv[x] = ("pi", x)
    for i, ff in enumerate(n.flops):
        drv[ff.q] = ("ff", i)
    for i, c in enumerate(n.cells):
        drv[c.out] = ("cell", i)

    def trace(net):
        w = 0
        while True:
            kind, idx = drv.get(net, ("pi", net))
            if kind == "ff":
                net = n.flops[idx].d
                w += 1
            elif kind == "cell":
                return idx, w
            else:
                return C, w

    edges = {}
    for ci, c in enumerate(n.cells):
        for net in c.ins:
            u, w = trace(net)
            key = (u, ci)
            if key not in edges or w < edges[key]:
                edges[key] = w
    for nets in n.outputs.values():
        for net in nets:
            u, w = trace(net)
            key = (u, C)
            if key not in edges or w < edges[key]:
                edges[key] = w
    d = [t.cell_delay(c.kind) for c in n.cells] + [0.0]
    return edges, d


def matrix_min_period(n: Netlist, t: TimingModel) -> float:
    """Exact minimum retimed period via all-pairs (W, D) matrices and
    difference-constraint feasibility; independent of the FEAS path."""
    edges, d = _trace_graph(n, t)
    V = len(d)
    dv = np.array(d, dtype=np.float64)
    T = float(dv.sum()) + 1.0
    K = T + 1.0
    INF = np.inf
    cost = np.full((V, V), INF)
    for (u, v), w in edges.items():
        cost[u, v] = min(cost[u, v], w * K - dv[u])
    for k in range(V - 1):  # host (index V-1) never appears mid-path:
        # the pipeline environment is sequential, not a feedthrough
        cost = np.minimum(cost, cost[:, k][:, None] + cost[k, :][None, :])
    finite = np.isfinite(cost)
    Wm = np.full((V, V), INF)
    Dm = np.full((V, V), -INF)
    Wm[finite] = np.floor((cost[finite] + T) / K)
    Dm[finite] = Wm[finite] * K - cost[finite] + dv[None, :].repeat(V, 0)[finite]
    for v in range(V):  # trivial paths
        Wm[v, v] = 0.0
        Dm[v, v] = dv[v]

    cand = sorted(set(Dm[np.isfinite(Dm)].tolist()))
    edge_u = np.array([u for (u, v) in edges], dtype=np.int64)
    edge_v = np.array([v for (u, v) in edges], dtype=np.int64)
    edge_w = np.array([w for w in edges.values()], dtype=np.float64)

    def feasible(budget: float) -> bool:
        over = np.argwhere(np.isfinite(Dm) & (Dm > budget))
        cu = np.concatenate([edge_u, over[:, 0]])
        cv = np.concatenate([edge_v, over[:, 1]])
        cb = np.concatenate([edge_w, Wm[over[:, 0], over[:, 1]] - 1.0])
        r = np.zeros(V)
        for _ in range(V + 1):
            nr = r.copy()
            np.minimum.at(nr, cu, r[cv] + cb)
            if np.array_equal(nr, r):
                return True
            r = nr
        return False

    lo, hi = 0, len(cand) - 1
    if not feasible(cand[-1]):
        return np.inf
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(cand[mid]):
            hi = mid
        else:
            lo = mid + 1
    return t.clk_to_q + cand[lo] + t.setup


def brute_force_longest_path(n: Netlist, t: TimingModel) -> float:
    """Exhaustive path enumeration between sequential endpoints.

    Exponential; only for netlists of ~15 cells or fewer.
    """
    consumers: dict[int, list[int]] = {}
    for idx, c in enumerate(n.cells):
        for i in c.ins:
            consumers.setdefault(i, []).append(idx)
    endpoint_nets = {ff.d for ff in n.flops}
    for nets in n.outputs.values():
        endpoint_nets.update(nets)
    sources = {0, 1}
    for nets in n.inputs.values():
        sources.update(nets)
    sources.update(ff.q for ff in n.flops)

    best = 0.0

    def walk(net, acc):
        nonlocal best
        if net in endpoint_nets and acc > best:
            best = acc
        for idx in consumers.get(net, ()):
            walk(n.cells[idx].out, acc + t.cell_delay(n.cells[idx].kind))

    for s in sources:
        walk(s, 0.0)
    return best


@pytest.fixture(scope="session")
def model_fleet():
    """Small trained-shaped random models reused across test modules."""
    from nnlogic.datasets import random_model

    return [
        random_model((3, 4, 2), seed=0, sparsity=0.0),
        random_model((4, 5, 3), seed=1, sparsity=0.3),
        random_model((6, 8, 5, 3), seed=2, sparsity=0.4),
        random_model((5, 7, 4), seed=3, sparsity=0.5,
                     weight_choices=[0, 1, -1, 2, -2, 4, -4, 8, -16, 32, 64, -128, 127, 107]),
    ]


@pytest.fixture(scope="session")
def netlist_fleet(model_fleet):
    from nnlogic.synth import flatten_network

    nets = [flatten_network(m) for m in model_fleet]
    nets += [random_pipeline(seed, groups=2 + seed % 3, cells_per_group=15) for seed in range(4)]
    nets += [build_chain(9, 2), build_chain(5, 1, source_flop=False)]
    return nets
