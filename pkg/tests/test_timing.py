"""Static timing, stage insertion, and retiming against independent oracles."""

import pytest

from nnlogic.netlist import INV, Netlist, NetlistError
from nnlogic.simplify import check_equiv
from nnlogic.synth import flatten_network
from nnlogic.timing import (
    TimingModel,
    explore_stages,
    insert_pipeline_stages,
    register_depth,
    retime,
    sta_min_period,
)

from conftest import (
    brute_force_longest_path,
    build_chain,
    chain_exhaustive_min_period,
    matrix_min_period,
    random_pipeline,
)


def test_timing_model_defaults():
    t = TimingModel()
    assert t.clk_to_q == 3 and t.setup == 1
    assert all(t.delay[k] == 1 for k in t.delay)
    with pytest.raises(ValueError):
        TimingModel(clk_to_q=-1)


def test_sta_worked_chain_example():
    net = build_chain(9, 2)
    res = sta_min_period(net)
    assert res.period == 13  # clk_to_q 3 + path 9 + setup 1
    assert res.path_delay == 9
    assert len(res.critical_path) == 9


def test_sta_single_inv():
    nl = Netlist()
    (a,) = nl.add_input_bus("a", 1)
    q = nl.add_flop(a)
    out = nl.add_cell(INV, (q,))
    q2 = nl.add_flop(out)
    nl.set_output_bus("z", (q2,))
    assert sta_min_period(nl).period == 5


def test_sta_against_brute_force_paths():
    t = TimingModel(delay={k: d for k, d in zip(
        ("INV", "BUF", "AND2", "OR2", "NAND2", "NOR2", "XOR2", "XNOR2", "MUX2"),
        (1, 1, 2, 2, 2, 2, 3, 3, 2),
    )})
    for seed in range(12):
        net = random_pipeline(seed, groups=2, cells_per_group=6, bus_width=3)
        want = brute_force_longest_path(net, t)
        got = sta_min_period(net, t)
        assert got.path_delay == want, (seed, got.path_delay, want)


def test_insert_stages_identity_and_latency():
    net = random_pipeline(4)
    assert insert_pipeline_stages(net, 0).stats() == net.stats()
    staged = insert_pipeline_stages(net, 2)
    assert staged.latency == net.latency + 2 * net.stage_count()
    # sequential behavior unchanged modulo added latency
    eq = check_equiv(
        staged,
        net,
        latency_offset=staged.latency - net.latency,
        trials=4096,
        warmup=register_depth(staged),
    )
    assert eq.equivalent


def test_insert_stages_requires_tags():
    nl = Netlist()
    (a,) = nl.add_input_bus("a", 1)
    q = nl.add_flop(a)  # untagged
    nl.set_output_bus("z", (q,))
    with pytest.raises(NetlistError):
        insert_pipeline_stages(nl, 1)


def test_insert_one_stage_single_layer_model(model_fleet):
    model = model_fleet[0]
    net = flatten_network(model)
    staged = insert_pipeline_stages(net, 1)
    assert staged.latency == net.latency + len(model.layers)
    eq = check_equiv(
        staged, net, latency_offset=len(model.layers), trials=4096,
        warmup=register_depth(staged),
    )
    assert eq.equivalent
    # the 1-layer case: latency 1 becomes exactly 2
    from nnlogic.qmodel import QLayer, QuantizedMLP, RequantParams

    one = QuantizedMLP(
        layers=(
            QLayer(weights=((2, -3),), acc_widths=(10,),
                   requant=RequantParams(m=16384, s=14), activation="none"),
        ),
        name="one",
    )
    base = flatten_network(one)
    assert base.latency == 1
    plus = insert_pipeline_stages(base, 1)
    assert plus.latency == 2
    eq = check_equiv(plus, base, latency_offset=1, trials=4096,
                     warmup=register_depth(plus))
    assert eq.equivalent


def test_retime_nine_delay_chain():
    net = build_chain(9, 2)
    before = sta_min_period(net).period
    res = retime(net)
    assert before == 13 and res.period == 7
    assert abs((before - res.period) / before - 0.4615) < 1e-3
    eq = check_equiv(net, res.netlist, latency_offset=0, trials=10_000,
                     warmup=register_depth(net) + 1)
    assert eq.equivalent


def test_insert_two_ranks_then_retime_chain():
    # the worked insertion example: one output rank, two ranks appended
    base = build_chain(9, 1, source_flop=False)
    assert sta_min_period(base).period == 13
    staged = insert_pipeline_stages(base, 2)
    assert staged.latency == 3
    res = retime(staged)
    assert res.period == 7
    eq = check_equiv(staged, res.netlist, latency_offset=0, trials=10_000,
                     warmup=register_depth(staged) + 1)
    assert eq.equivalent


def test_retime_already_balanced():
    nl = Netlist()
    (a,) = nl.add_input_bus("a", 1)
    cur = nl.add_flop(a)
    cur = nl.add_cell(INV, (cur,))
    cur = nl.add_flop(cur)
    nl.set_output_bus("z", (cur,))
    res = retime(nl)
    assert res.period == 5
    assert res.netlist.stats() == nl.stats()


def test_retime_keeps_cells_and_reduces_period(netlist_fleet):
    t = TimingModel()
    for net in netlist_fleet:
        res = retime(net, t)
        before = sta_min_period(net, t)
        assert res.period <= before.period
        assert sta_min_period(res.netlist, t).period <= before.period
        a, b = net.stats()["cells"], res.netlist.stats()["cells"]
        assert a == b  # kinds and counts untouched
        eq = check_equiv(
            net, res.netlist, latency_offset=0, trials=10_000,
            warmup=max(register_depth(net), register_depth(res.netlist)) + 1,
        )
        assert eq.equivalent, net.name


def test_retime_matches_chain_exhaustive():
    t = TimingModel()
    for cells, ranks, source in [(9, 2, True), (7, 1, True), (12, 3, False),
                                 (5, 4, True), (16, 2, True)]:
        net = build_chain(cells, ranks, source_flop=source)
        res = retime(net, t)
        total = ranks + (1 if source else 0)
        want = chain_exhaustive_min_period(cells, total, t)
        assert res.period == want, (cells, ranks, source, res.period, want)


def test_retime_matches_matrix_oracle_random():
    t = TimingModel()
    for seed in range(8):
        net = random_pipeline(seed + 100, groups=2 + seed % 3,
                              cells_per_group=10 + 3 * seed, bus_width=3)
        res = retime(net, t)
        want = matrix_min_period(net, t)
        assert res.period == want, (seed, res.period, want)


def test_retime_matches_oracle_weighted_delays():
    delay = dict.fromkeys(
        ("INV", "BUF", "AND2", "OR2", "NAND2", "NOR2", "XOR2", "XNOR2", "MUX2"), 1
    )
    delay.update(XOR2=3, XNOR2=3, MUX2=2, INV=2)
    t = TimingModel(delay=delay, clk_to_q=2, setup=2)
    for seed in range(6):
        net = random_pipeline(seed + 300, groups=3, cells_per_group=12, bus_width=3)
        res = retime(net, t)
        want = matrix_min_period(net, t)
        assert res.period == want, (seed, res.period, want)


def test_retime_float_delays_on_chain():
    delay = dict.fromkeys(
        ("INV", "BUF", "AND2", "OR2", "NAND2", "NOR2", "XOR2", "XNOR2", "MUX2"), 0.5
    )
    t = TimingModel(delay=delay, clk_to_q=1.5, setup=0.25)
    net = build_chain(9, 2)
    res = retime(net, t)
    want = chain_exhaustive_min_period(9, 3, t, cell_delay=0.5)
    assert abs(res.period - want) < 1e-6, (res.period, want)
    eq = check_equiv(net, res.netlist, trials=4096,
                     warmup=register_depth(net) + 1)
    assert eq.equivalent


def test_retime_latency_preserved():
    net = build_chain(9, 2)
    res = retime(net)
    assert register_depth(res.netlist) == register_depth(net)


def test_explore_stages_monotone():
    net = flatten_network(
        __import__("nnlogic.datasets", fromlist=["random_model"]).random_model(
            (3, 4, 3), seed=6
        )
    )
    rows = explore_stages(net, TimingModel(), max_k=3)
    assert [r["k"] for r in rows] == [0, 1, 2, 3]
    periods = [r["period"] for r in rows]
    assert all(a >= b for a, b in zip(periods, periods[1:]))
    assert rows[0]["period"] == retime(net).period


def test_register_depth():
    assert register_depth(build_chain(9, 2)) == 3
    assert register_depth(build_chain(4, 1, source_flop=False)) == 1
