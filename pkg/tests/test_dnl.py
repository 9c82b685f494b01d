import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from odfusion import (
    DnlConfig,
    assign_path_flows,
    enumerate_paths,
    extract_density,
    extract_link_flow,
    extract_travel_time,
    route_choice,
    run_dnl,
)
from odfusion.dnl import (
    ARR_MOVE,
    ARR_PARK,
    DEP_MOVE,
    DEP_PARK,
    build_link_state,
    free_flow_path_costs,
    instantaneous_path_costs,
)

from conftest import make_line_net, step_config


def cum_at(curves, c, a, kind, ts):
    return [curves.value_at(c, a, kind, t) for t in ts]


def line_setup(T, curb=0.0, parking=False, **cfg_kw):
    net = make_line_net(curb=curb, parking=parking)
    ps = enumerate_paths(net, 1)
    cfg = step_config(T, **cfg_kw)
    f = np.zeros((2, 1, T))
    return net, ps, cfg, f


def run_toy(toy_net, toy_paths, scale, T=6, seed=0, **cfg_kw):
    cfg = DnlConfig(horizon_intervals=T, **cfg_kw)
    rng = np.random.default_rng(seed)
    q = np.zeros((2, toy_net.n_od, T))
    q[0, :, :2] = rng.uniform(0, scale, (toy_net.n_od, 2))
    q[1, :, :2] = rng.uniform(0, scale / 10, (toy_net.n_od, 2))
    p = route_choice(free_flow_path_costs(toy_paths, T), cfg.logit_scale, toy_paths)
    f = assign_path_flows(q, p, toy_paths)
    return run_dnl(toy_net, toy_paths, f, cfg, seed=seed), f, cfg


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        DnlConfig(horizon_intervals=0)
    with pytest.raises(ValueError):
        DnlConfig(horizon_intervals=4, sim_step=7.0, interval_length=900.0)
    with pytest.raises(ValueError):
        DnlConfig(horizon_intervals=4, parking_fraction=1.5)
    with pytest.raises(ValueError):
        DnlConfig(horizon_intervals=4, enroute_fraction=-0.1)
    cfg = DnlConfig(horizon_intervals=4)
    assert cfg.steps_per_interval == 180
    assert cfg.n_steps == 720


# ---------------------------------------------------------------- routing


def test_route_choice_two_path_values(toy_net):
    """Hand value: scale 0.01 and a 100 s cost gap give the logistic pair
    (0.7310586, 0.2689414)."""
    ps = enumerate_paths(toy_net, 2)
    k0, k1 = ps.od_paths[4][:2]
    costs = free_flow_path_costs(ps, 1)
    costs[:, k0, :] = 100.0
    costs[:, k1, :] = 200.0
    p = route_choice(costs, 0.01, ps)
    assert p[0, k0, 0] == pytest.approx(0.7310585786300049, rel=1e-12)
    assert p[0, k1, 0] == pytest.approx(0.2689414213699951, rel=1e-12)


def test_route_choice_sums_to_one(toy_paths):
    rng = np.random.default_rng(3)
    T = 5
    costs = rng.uniform(50, 400, (2, toy_paths.n_paths, T))
    p = route_choice(costs, 0.01, toy_paths)
    for c in range(2):
        for od, ids in toy_paths.od_paths.items():
            assert_allclose(p[c, list(ids), :].sum(axis=0), 1.0, rtol=1e-12)


def test_route_choice_rejects_bad_costs(toy_paths):
    costs = free_flow_path_costs(toy_paths, 2)
    costs[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        route_choice(costs, 0.01, toy_paths)


def test_assign_path_flows_splits_demand(toy_net, toy_paths):
    T = 2
    q = np.zeros((2, toy_net.n_od, T))
    q[0, 0, 0] = 100.0
    p = np.zeros((2, toy_paths.n_paths, T))
    ids = toy_paths.od_paths[0]
    p[0, ids[0], :] = 0.7
    p[0, ids[1], :] = 0.3
    f = assign_path_flows(q, p, toy_paths)
    assert f[0, ids[0], 0] == pytest.approx(70.0)
    assert f[0, ids[1], 0] == pytest.approx(30.0)
    assert f.sum() == pytest.approx(100.0)
    with pytest.raises(ValueError):
        assign_path_flows(-q, p, toy_paths)


# ---------------------------------------------------------------- loading


def test_single_car_exact_timeline():
    """One car crosses the corridor in 135 s: step-rounded free-flow times
    10 + 75 + 40 + 10 with an idle discharge server at every link."""
    net, ps, cfg, f = line_setup(40)
    f[0, 0, 0] = 1.0
    curves, state = run_dnl(net, ps, f, cfg, seed=5)
    assert curves.cleared
    for pos, (t_in, t_out) in enumerate([(0, 10), (10, 85), (85, 125), (125, 135)]):
        times_a, sizes_a, _, _ = curves.events(0, pos, ARR_MOVE)
        times_d, _, _, _ = curves.events(0, pos, DEP_MOVE)
        assert_allclose(times_a, [t_in])
        assert_allclose(times_d, [t_out])
        assert_allclose(sizes_a, [1.0])


def test_single_truck_exact_timeline():
    net, ps, cfg, f = line_setup(40)
    f[1, 0, 0] = 1.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=5)
    # truck rounding: 10 + 90 + 45 + 10
    times_d, _, _, _ = curves.events(1, 3, DEP_MOVE)
    assert_allclose(times_d, [155.0])


def test_burst_discharge_pattern_cars():
    """Ten cars hit the 1800 veh/h bottleneck at once: the token bucket
    serves 2,3,2,3 over four steps."""
    net, ps, cfg, f = line_setup(40)
    f[0, 0, 0] = 10.0
    curves, state = run_dnl(net, ps, f, cfg, seed=1)
    assert curves.cleared

    assert_allclose(cum_at(curves, 0, 1, DEP_MOVE, [80, 85, 90]), [0, 5, 10])
    assert_allclose(
        cum_at(curves, 0, 2, DEP_MOVE, [120, 125, 130, 135, 140]),
        [0, 2, 5, 7, 10])
    assert_allclose(
        cum_at(curves, 0, 3, DEP_MOVE, [130, 135, 140, 145, 150]),
        [0, 2, 5, 7, 10])


def test_burst_discharge_pattern_trucks():
    """Five trucks at PCE 2 against rate 2.5 leave one per step, two at the
    last once the bucket has caught up."""
    net, ps, cfg, f = line_setup(40)
    f[1, 0, 0] = 5.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=1)
    assert curves.cleared
    assert_allclose(
        cum_at(curves, 1, 2, DEP_MOVE, [140, 145, 150, 155, 160]),
        [0, 1, 2, 3, 5])


def test_fractional_packet_volume_is_conserved():
    net, ps, cfg, f = line_setup(40)
    f[0, 0, 0] = 2.7
    curves, _ = run_dnl(net, ps, f, cfg, seed=1)
    assert curves.cleared
    assert curves.total(0, 0, ARR_MOVE) == pytest.approx(2.7, abs=1e-12)
    assert curves.total(0, 3, DEP_MOVE) == pytest.approx(2.7, abs=1e-12)


def test_departure_jitter_determinism(toy_net, toy_paths):
    (c1, _), f, cfg = run_toy(toy_net, toy_paths, 120.0, seed=9)
    (c2, _), _, _ = run_toy(toy_net, toy_paths, 120.0, seed=9)
    (c3, _), _, _ = run_toy(toy_net, toy_paths, 120.0, seed=10)
    same = True
    differs = False
    for c in range(2):
        for a in range(toy_net.n_links):
            for kind in range(4):
                t1, s1, p1, i1 = c1.events(c, a, kind)
                t2, s2, p2, i2 = c2.events(c, a, kind)
                t3, _, _, _ = c3.events(c, a, kind)
                same &= np.array_equal(t1, t2) and np.array_equal(s1, s2) \
                    and np.array_equal(p1, p2) and np.array_equal(i1, i2)
                differs |= not np.array_equal(t1, t3)
    assert same
    assert differs


# ---------------------------------------------------------------- parking


def test_parking_timeline_and_curb_release():
    net, ps, cfg, f = line_setup(400, curb=5.0, parking=True, parking_fraction=0.5)
    f[0, 0, 0] = 1.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=2)
    assert curves.cleared

    times, sizes, _, _ = curves.events(0, 2, ARR_PARK)
    assert_allclose(times, [85.0])
    assert_allclose(sizes, [0.5])
    times, sizes, _, _ = curves.events(0, 2, DEP_PARK)
    # curb exit = entry + rounded traversal + dwell = 85 + 40 + 1800
    assert_allclose(times, [1925.0])
    assert_allclose(sizes, [0.5])

    # the through half leaves the bottleneck on schedule
    times, sizes, _, _ = curves.events(0, 2, DEP_MOVE)
    assert_allclose(times, [125.0])
    assert_allclose(sizes, [0.5])

    # parked vehicle rejoins the downstream connector after its dwell
    times, _, _, _ = curves.events(0, 3, ARR_MOVE)
    assert_allclose(times, [125.0, 1925.0])


def test_parking_probe_ignores_parked_traffic():
    net, ps, cfg, f = line_setup(400, curb=5.0, parking=True, parking_fraction=0.5)
    f[0, 0, 0] = 1.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=2)
    assert extract_travel_time(curves, 2, 0, 17) == pytest.approx(40.0)
    # parked occupancy persists long after the through half has left
    assert extract_density(curves, 2, 0, 100) == pytest.approx(0.5)


def test_curb_too_small_turns_parker_into_through():
    net, ps, cfg, f = line_setup(40, curb=0.4, parking=True, parking_fraction=0.5)
    f[0, 0, 0] = 1.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=2)
    assert curves.cleared
    assert curves.total(0, 2, ARR_PARK) == 0.0
    assert curves.total(0, 2, DEP_MOVE) == pytest.approx(1.0)


def test_full_curb_rejects_second_parker():
    net, ps, cfg, f = line_setup(400, curb=0.5, parking=True, parking_fraction=0.5)
    f[0, 0, 0] = 1.0
    f[0, 0, 1] = 1.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=2)
    assert curves.cleared
    assert curves.total(0, 2, ARR_PARK) == pytest.approx(0.5)
    assert curves.total(0, 2, DEP_PARK) == pytest.approx(0.5)
    assert curves.total(0, 2, ARR_MOVE) == pytest.approx(1.5)


def test_parking_fraction_zero_disables_diversion():
    net, ps, cfg, f = line_setup(40, curb=5.0, parking=True,
                                 parking_fraction=0.0)
    f[0, 0, 0] = 4.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=2)
    assert curves.total(0, 2, ARR_PARK) == 0.0


# ---------------------------------------------------------------- extraction


def test_extract_link_flow_and_density_burst():
    net, ps, cfg, f = line_setup(40)
    f[0, 0, 0] = 10.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=1)
    # five cars enter the bottleneck in [85,90) and five in [90,95)
    assert extract_link_flow(curves, 2, 0, 17) == pytest.approx(5.0)
    assert extract_link_flow(curves, 2, 0, 18) == pytest.approx(5.0)
    assert extract_link_flow(curves, 2, 0, 19) == 0.0
    # occupancy at interval ends while the queue drains
    expect = {17: 5.0, 18: 10.0, 24: 10.0, 25: 8.0, 26: 5.0, 27: 3.0, 28: 0.0}
    for t, val in expect.items():
        assert extract_density(curves, 2, 0, t) == pytest.approx(val)


def test_extract_density_window_mean():
    net, ps, cfg, f = line_setup(40)
    f[0, 0, 0] = 10.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=1)
    mid = (10.0 + 8.0 + 5.0) / 3.0
    assert extract_density(curves, 2, 0, 25, delta=1) == pytest.approx(mid)
    # clipped at the horizon start
    first = extract_density(curves, 2, 0, 0, delta=2)
    vals = [extract_density(curves, 2, 0, j) for j in range(3)]
    assert first == pytest.approx(np.mean(vals))


def test_extract_travel_time_probe_and_fallback():
    net, ps, cfg, f = line_setup(40)
    f[0, 0, 0] = 10.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=1)
    # probes: first arrival at 85 leaves at 130, first at 90 leaves at 140
    assert extract_travel_time(curves, 2, 0, 17) == pytest.approx(45.0)
    assert extract_travel_time(curves, 2, 0, 18) == pytest.approx(50.0)
    # empty interval falls back to the exact free-flow time
    assert extract_travel_time(curves, 2, 0, 3) == pytest.approx(36.0)
    assert extract_travel_time(curves, 2, 1, 3) == pytest.approx(45.0)


def test_build_link_state_matches_pointwise_extraction():
    net, ps, cfg, f = line_setup(40)
    f[0, 0, 0] = 10.0
    curves, state = run_dnl(net, ps, f, cfg, seed=1)
    again = build_link_state(curves, delta=0)
    assert_allclose(state.inflow, again.inflow)
    assert state.inflow[0, 2, 17] == pytest.approx(5.0)
    assert state.travel_time[0, 2, 18] == pytest.approx(50.0)
    assert state.remaining[0, 2, 24] == pytest.approx(10.0)


def test_path_cost_helpers(toy_net, toy_paths):
    T = 3
    base = free_flow_path_costs(toy_paths, T)
    assert base.shape == (2, toy_paths.n_paths, T)
    assert base[0, 0, 0] == pytest.approx(194.4)
    assert_allclose(base[:, :, 0], base[:, :, 2])

    (curves, state), f, cfg = run_toy(toy_net, toy_paths, 60.0, T=4)
    inst = instantaneous_path_costs(state, toy_paths)
    assert inst.shape == (2, toy_paths.n_paths, 4)
    # instantaneous costs can never undercut free flow
    assert np.all(inst >= free_flow_path_costs(toy_paths, 4) - 1e-9)


# ---------------------------------------------------------------- invariants


def check_curve_invariants(net, curves, cleared_expected=True):
    dt = curves.sim_step
    for c in range(2):
        for a in range(net.n_links):
            lag = max(1, int(np.ceil(net.links[a].free_flow_time(c) / dt - 1e-9))) * dt
            for kind in range(4):
                _, sizes, _, _ = curves.events(c, a, kind)
                assert np.all(sizes > 0)
            td, _, _, _ = curves.events(c, a, DEP_MOVE)
            for t in td:
                assert curves.value_at(c, a, DEP_MOVE, t) <= \
                    curves.value_at(c, a, ARR_MOVE, t - lag) + 1e-9
            tp, _, _, _ = curves.events(c, a, DEP_PARK)
            ta, _, _, _ = curves.events(c, a, ARR_PARK)
            if cleared_expected:
                assert curves.total(c, a, ARR_MOVE) == \
                    pytest.approx(curves.total(c, a, DEP_MOVE), abs=1e-9)
                assert curves.total(c, a, ARR_PARK) == \
                    pytest.approx(curves.total(c, a, DEP_PARK), abs=1e-9)
            for t in tp:
                assert curves.value_at(c, a, DEP_PARK, t) <= \
                    curves.value_at(c, a, ARR_PARK, t) + 1e-9


def test_random_runs_preserve_invariants(toy_net, toy_paths):
    """Conservation, queue lag, and parking pairing over randomized loads."""
    for trial in range(12):
        (curves, state), f, cfg = run_toy(
            toy_net, toy_paths, 90.0, T=8, seed=100 + trial)
        assert curves.cleared
        check_curve_invariants(toy_net, curves)
        fftt = np.array([[ln.free_flow_time(c) for ln in toy_net.links]
                         for c in range(2)])
        assert np.all(state.travel_time >= fftt[:, :, None] - 1e-9)
        assert np.all(state.inflow >= 0)
        assert np.all(state.remaining >= -1e-9)


def test_uncleared_run_is_flagged(toy_net, toy_paths):
    T = 2
    cfg = DnlConfig(horizon_intervals=T)
    q = np.full((2, toy_net.n_od, T), 50.0)
    p = route_choice(free_flow_path_costs(toy_paths, T), cfg.logit_scale, toy_paths)
    f = assign_path_flows(q, p, toy_paths)
    curves, state = run_dnl(toy_net, toy_paths, f, cfg, seed=3)
    # parked vehicles dwell past the 1800 s horizon
    assert not curves.cleared
    assert not state.cleared


def test_check_bounds_flags_overfull_link():
    net, ps, cfg, f = line_setup(40)
    f[0, 0, 0] = 10.0
    _, state = run_dnl(net, ps, f, cfg, seed=1)
    # queue of 10 fits: storage on the bottleneck is 90*0.5 + 40*0.5 = 65
    assert state.check_bounds(net) == []
    net2, ps2, cfg2, f2 = line_setup(200)
    f2[0, 0, 0] = 200.0
    _, state = run_dnl(net2, ps2, f2, cfg2, seed=1)
    assert any("link 2" in m for m in state.check_bounds(net2))


def test_enroute_fraction_reroutes_keep_conservation(toy_net, toy_paths):
    T = 6
    cfg = DnlConfig(horizon_intervals=T, enroute_fraction=0.3)
    rng = np.random.default_rng(8)
    q = np.zeros((2, toy_net.n_od, T))
    q[:, :, :2] = rng.uniform(0, 40, (2, toy_net.n_od, 2))
    p = route_choice(free_flow_path_costs(toy_paths, T), cfg.logit_scale, toy_paths)
    f = assign_path_flows(q, p, toy_paths)
    curves, _ = run_dnl(toy_net, toy_paths, f, cfg, seed=4)
    assert curves.cleared
    # all demand still reaches the destination connectors
    dest = [toy_net.index_of(l) for l in (13, 14, 15)]
    arrived = sum(curves.total(c, a, DEP_MOVE) for c in range(2) for a in dest)
    assert arrived == pytest.approx(float(q.sum()), rel=1e-9)


def test_curve_dump_format(tmp_path):
    net, ps, cfg, f = line_setup(400, curb=5.0, parking=True, parking_fraction=0.5)
    f[0, 0, 0] = 1.0
    curves, _ = run_dnl(net, ps, f, cfg, seed=2)
    out = tmp_path / "curves.jsonl"
    curves.dump_jsonl(out)
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert all(set(r) == {"link", "class", "curve", "t", "value", "tag"}
               for r in rows)
    park = [r for r in rows if r["curve"] == "Ap"]
    assert park == [{"link": 2, "class": "car", "curve": "Ap", "t": 85.0,
                     "value": 0.5, "tag": [0, 0]}]
