import itertools
import json

import numpy as np
import pytest

from topo_nav.mapmatch import (
    BrokenRouteError, MatchConfig, NoCandidateError, _edge_lengths, bridge_route, find_candidates, match_trace,
    route_distance_matrix, route_edges, transition_scores, viterbi,
)
from topo_nav.road_graph import WorldSpec, build_world, random_route
from topo_nav.sim import GpsNoise, simulate_route

GRID = build_world(WorldSpec("grid", 400.0, 100.0))


def brute_force(log_emission, log_transition):
    best, best_path = -np.inf, None
    for path in itertools.product(*[range(len(e)) for e in log_emission]):
        s = log_emission[0][path[0]]
        for t in range(1, len(path)):
            s += log_transition[t - 1][path[t - 1], path[t]] + log_emission[t][path[t]]
        if s > best:
            best, best_path = s, list(path)
    return best_path, best


def random_instance(rng):
    n = int(rng.integers(1, 7))
    sizes = rng.integers(1, 4, n)
    em = [rng.normal(0, 3, k) for k in sizes]
    tr = [rng.normal(0, 3, (sizes[t], sizes[t + 1])) for t in range(n - 1)]
    for m in tr:  # some pruned transitions, never a whole matrix
        mask = rng.random(m.shape) < 0.2
        mask.flat[int(rng.integers(m.size))] = False
        m[mask] = -np.inf
    return em, tr


def test_viterbi_equals_enumeration_on_200_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        em, tr = random_instance(rng)
        path, score = viterbi(em, tr)
        oracle, oracle_score = brute_force(em, tr)
        assert path == oracle
        assert score == pytest.approx(oracle_score, rel=1e-12, abs=1e-12)


def test_viterbi_tie_goes_to_lowest_index():
    path, _ = viterbi([np.zeros(3), np.zeros(2)], [np.zeros((3, 2))])
    assert path == [0, 0]


def test_viterbi_invariant_to_emission_rescaling():
    rng = np.random.default_rng(1)
    for _ in range(50):
        em, tr = random_instance(rng)
        shifted = [e + 17.3 for e in em]  # multiplying every emission probability by a constant
        assert viterbi(em, tr)[0] == viterbi(shifted, tr)[0]


def test_match_trace_matches_enumeration_on_real_candidates():
    rng = np.random.default_rng(4)
    cfg = MatchConfig(radius=8.0)
    done = 0
    for seed in range(40):
        route = random_route(GRID, np.random.default_rng(seed), 150.0)
        tr = simulate_route(GRID, route, gps=GpsNoise(3.0, 0.0), rng=np.random.default_rng(seed))
        idx = np.sort(rng.choice(len(tr), size=5, replace=False))
        pts = tr.noisy[idx]
        try:
            res = match_trace(GRID, pts, cfg)
        except NoCandidateError:
            continue
        if max(len(c.edges) for c in res.candidates) > 3:
            continue
        # rebuild the same scores and enumerate every candidate path
        lengths, _ = _edge_lengths(GRID)
        tr_scores = [transition_scores(route_distance_matrix(GRID, a, b, lengths),
                                       float(np.hypot(*(pts[t + 1, :2] - pts[t, :2]))), cfg)
                     for t, (a, b) in enumerate(zip(res.candidates[:-1], res.candidates[1:]))]
        path, _ = brute_force([c.log_emission for c in res.candidates], tr_scores)
        assert res.edges == [int(c.edges[i]) for c, i in zip(res.candidates, path)]
        done += 1
    assert done >= 10


def test_noise_free_single_edge():
    e = next(i for i, e in enumerate(GRID.edges) if (e.src, e.dst) == (0, 1))
    (x0, y0), (x1, y1) = GRID.edges[e].polyline[0], GRID.edges[e].polyline[-1]
    ts = np.linspace(0.1, 0.9, 30)
    pts = np.column_stack([x0 + ts * (x1 - x0), y0 + ts * (y1 - y0)])
    assert match_trace(GRID, pts).edges == [e] * 30


def test_no_candidate_names_sample():
    pts = np.array([[0.0, 0.0], [5000.0, 5000.0]])
    with pytest.raises(NoCandidateError) as exc:
        match_trace(GRID, pts)
    assert exc.value.index == 1


def test_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(sigma_emit=0.0)


def test_candidates_are_sorted_and_within_radius():
    cands = find_candidates(GRID, np.array([[10.0, 3.0], [100.0, 100.0]]), MatchConfig())
    for c in cands:
        assert (np.diff(c.edges) > 0).all() and (c.distance <= 30.0).all()


def _grid_accuracy(sigma, seeds, cfg=MatchConfig()):
    hit = total = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        route = random_route(GRID, rng, 400.0)
        tr = simulate_route(GRID, route, gps=GpsNoise(sigma, 0.0), rng=rng)
        truth = np.asarray(route)[tr.route_pos]
        m = np.asarray(match_trace(GRID, tr.noisy, cfg).edges)
        hit += int((m == truth).sum())
        total += len(m)
    return hit / total


def test_grid_accuracy_at_five_metres():
    assert _grid_accuracy(5.0, range(10)) >= 0.95


def test_accuracy_non_increasing_in_noise():
    cfg = MatchConfig(radius=60.0)
    acc = [_grid_accuracy(s, range(20), cfg) for s in (1.0, 3.0, 6.0)]
    assert acc[0] >= acc[1] >= acc[2]


def test_route_edges_examples():
    e01 = next(i for i, e in enumerate(GRID.edges) if (e.src, e.dst) == (0, 1))
    e12 = next(i for i, e in enumerate(GRID.edges) if (e.src, e.dst) == (1, 2))
    far = next(i for i, e in enumerate(GRID.edges) if e.src not in (0, 1, 2) and e.dst not in (0, 1, 2))
    assert route_edges(GRID, [e01, e01, e01]) == [e01]
    assert route_edges(GRID, [e01, e01, e12]) == [e01, e12]
    with pytest.raises(BrokenRouteError):
        route_edges(GRID, [e01, far])
    bridged = bridge_route(GRID, [e01, far])
    assert route_edges(GRID, bridged) == bridged


def test_json_outputs():
    route = random_route(GRID, np.random.default_rng(0), 100.0)
    tr = simulate_route(GRID, route, rng=np.random.default_rng(0))
    res = match_trace(GRID, tr.noisy[:20])
    assert json.loads(res.to_json())["edges"] == res.edges
    dump = json.loads(res.candidates_json())
    assert len(dump) == 20 and all(d["candidates"] for d in dump)
