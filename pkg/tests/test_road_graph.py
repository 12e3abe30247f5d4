import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topo_nav.road_graph import (
    ConfigurationError, DanglingReferenceError, DegenerateWayError, GeoPoint, NoRouteError, OsmParseError,
    RoadGraph, WORLD_KINDS, WorldSpec, build_world, dumps_graph, edge_weight, loads_graph, make_edge,
    parse_osm, route_weight, shortest_route,
)

ORIGIN = GeoPoint(42.36, -71.09)

TWO_NODES = """<?xml version="1.0"?>
<osm version="0.6">
  <node id="1" lat="42.3600" lon="-71.0900"/>
  <node id="2" lat="42.3610" lon="-71.0900"/>
  <way id="10"><nd ref="1"/><nd ref="2"/><tag k="highway" v="residential"/></way>
</osm>
"""


def test_empty_document():
    g = parse_osm("<osm/>", ORIGIN)
    assert len(g.nodes) == 0 and len(g.edges) == 0


def test_two_way_way_gives_both_directions():
    g = parse_osm(TWO_NODES, ORIGIN)
    assert sorted(g.nodes) == [1, 2]
    assert sorted((e.src, e.dst) for e in g.edges) == [(1, 2), (2, 1)]
    # manual construction: node 1 is the origin, node 2 lies 0.001 deg north
    assert g.nodes[1] == pytest.approx((0.0, 0.0), abs=1e-9)
    assert g.nodes[2][1] == pytest.approx(6_371_000 * math.radians(0.001), rel=1e-9)  # 42.361 - 42.36 is inexact in binary
    expected = edge_weight(GeoPoint(42.36, -71.09), GeoPoint(42.361, -71.09))
    assert all(e.weight == pytest.approx(expected, rel=1e-12) for e in g.edges)
    g.validate()


def test_oneway_keeps_forward_edge_only():
    doc = TWO_NODES.replace('<tag k="highway" v="residential"/>', '<tag k="oneway" v="yes"/>')
    g = parse_osm(doc, ORIGIN)
    assert [(e.src, e.dst) for e in g.edges] == [(1, 2)]


def test_dangling_reference_names_the_id():
    doc = TWO_NODES.replace('<nd ref="2"/>', '<nd ref="99"/>')
    with pytest.raises(DanglingReferenceError, match="99"):
        parse_osm(doc, ORIGIN)


def test_degenerate_way():
    doc = TWO_NODES.replace('<nd ref="2"/>', "")
    with pytest.raises(DegenerateWayError):
        parse_osm(doc, ORIGIN)


def test_malformed_xml_reports_position():
    with pytest.raises(OsmParseError) as exc:
        parse_osm("<osm>\n<node id='1' lat='0' lon='0'>\n</osm>", ORIGIN)
    assert exc.value.line == 3


def test_ways_split_at_shared_nodes_and_keep_shape_points():
    doc = """<osm>
      <node id="1" lat="0.0000" lon="0.0000"/>
      <node id="2" lat="0.0005" lon="0.0001"/>
      <node id="3" lat="0.0010" lon="0.0000"/>
      <node id="4" lat="0.0010" lon="0.0010"/>
      <node id="5" lat="0.0020" lon="0.0000"/>
      <way id="a"><nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="5"/></way>
      <way id="b"><nd ref="3"/><nd ref="4"/><tag k="oneway" v="yes"/><tag k="name" v="x"/></way>
    </osm>"""
    g = parse_osm(doc, GeoPoint(0.0, 0.0))
    assert sorted(g.nodes) == [1, 3, 4, 5]  # node 2 is a shape point only
    pairs = sorted((e.src, e.dst) for e in g.edges)
    assert pairs == [(1, 3), (3, 1), (3, 4), (3, 5), (5, 3)]
    e13 = next(e for e in g.edges if (e.src, e.dst) == (1, 3))
    assert len(e13.polyline) == 3
    by_hand = (edge_weight(GeoPoint(0, 0), GeoPoint(0.0005, 0.0001))
               + edge_weight(GeoPoint(0.0005, 0.0001), GeoPoint(0.001, 0)))
    assert e13.weight == pytest.approx(by_hand, rel=1e-12)
    g.validate()


def test_edge_weight_examples():
    a = GeoPoint(0.0, 0.0)
    assert edge_weight(a, a) == 0.0
    # R * pi / 180 evaluated with mpmath at 40 digits
    assert edge_weight(a, GeoPoint(0.0, 1.0)) == pytest.approx(111194.92664455874, abs=1e-6)


geo = st.builds(GeoPoint, st.floats(-89.9, 89.9), st.floats(-179.9, 179.9))


@settings(max_examples=100)
@given(geo, geo)
def test_edge_weight_symmetric_nonnegative(a, b):
    assert edge_weight(a, b) == pytest.approx(edge_weight(b, a), rel=1e-12, abs=1e-9)
    assert edge_weight(a, b) >= 0.0


def test_geopoint_bounds():
    with pytest.raises(ValueError):
        GeoPoint(91.0, 0.0)
    with pytest.raises(ValueError):
        GeoPoint(0.0, 180.0)


def test_grid_two_by_two():
    g = build_world(WorldSpec("grid", extents=50.0, block_size=50.0))
    assert len(g.nodes) == 4 and len(g.edges) == 8


def test_four_way_counts():
    g = build_world(WorldSpec("four-way", 100.0, 50.0))
    assert len(g.nodes) == 5 and len(g.edges) == 8


def test_roundabout_has_ring_and_four_approaches():
    g = build_world(WorldSpec("roundabout", 120.0, 40.0))
    ring = [e for e in g.edges if len(e.polyline) > 2]
    assert len(ring) == 4
    assert len(g.edges) - len(ring) == 8


@pytest.mark.parametrize("kind", WORLD_KINDS)
def test_worlds_deterministic_and_valid(kind):
    spec = WorldSpec(kind, 200.0, 40.0, seed=7)
    a, b = build_world(spec), build_world(spec)
    assert dumps_graph(a) == dumps_graph(b)
    a.validate()


@pytest.mark.parametrize("kind", WORLD_KINDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_worlds_strongly_connected(kind, seed):
    g = build_world(WorldSpec(kind, 200.0, 40.0, seed=seed))
    assert len(g.nodes) <= 100
    for src in g.nodes:
        for dst in g.nodes:
            shortest_route(g, src, dst)  # raises NoRouteError otherwise


def test_unsupported_kind():
    with pytest.raises(ConfigurationError):
        build_world(WorldSpec("spiral", 100.0, 50.0))


def test_world_spec_validation():
    with pytest.raises(ConfigurationError):
        WorldSpec("grid", 10.0, 50.0)
    with pytest.raises(ConfigurationError):
        WorldSpec("grid", 10.0, 0.0)


@pytest.mark.parametrize("kind", WORLD_KINDS)
def test_graph_json_round_trip(kind):
    g = build_world(WorldSpec(kind, 200.0, 40.0, seed=3))
    text = dumps_graph(g)
    again = loads_graph(text)
    assert again == g
    assert dumps_graph(again) == text


def test_parsed_graph_round_trip():
    g = parse_osm(TWO_NODES, ORIGIN)
    assert loads_graph(dumps_graph(g)) == g


def test_route_empty_and_lattice_corners():
    g = build_world(WorldSpec("grid", 50.0, 50.0))
    assert shortest_route(g, 0, 0) == []
    r = shortest_route(g, 0, 3)
    # enumeration on the 4-node lattice: both corner-to-corner paths have two blocks
    assert route_weight(g, r) == pytest.approx(2 * 50.0, rel=1e-6)


def test_no_route():
    origin = GeoPoint(0.0, 0.0)
    nodes = {0: (0.0, 0.0), 1: (10.0, 0.0), 2: (50.0, 0.0)}
    g = RoadGraph(nodes, (make_edge(0, 1, [nodes[0], nodes[1]], origin),), origin)
    with pytest.raises(NoRouteError):
        shortest_route(g, 0, 2)


def _brute_force_best(g, src, dst):
    if src == dst:
        return 0.0
    best = math.inf
    others = [n for n in g.nodes if n not in (src, dst)]
    for r in range(len(others) + 1):
        for mid in itertools.permutations(others, r):
            seq = (src, *mid, dst)
            total = 0.0
            for a, b in zip(seq[:-1], seq[1:]):
                ws = [e.weight for e in g.edges if e.src == a and e.dst == b]
                if not ws:
                    break
                total += min(ws)
            else:
                best = min(best, total)
    return best


@pytest.mark.parametrize("seed", range(6))
def test_shortest_route_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    origin = GeoPoint(0.0, 0.0)
    n = int(rng.integers(4, 8))
    nodes = {i: (float(rng.uniform(0, 300)), float(rng.uniform(0, 300))) for i in range(n)}
    edges = []
    for a in range(n):
        for b in range(n):
            if a != b and rng.random() < 0.35:
                mid = ((nodes[a][0] + nodes[b][0]) / 2 + rng.uniform(-40, 40),
                       (nodes[a][1] + nodes[b][1]) / 2 + rng.uniform(-40, 40))
                edges.append(make_edge(a, b, [nodes[a], mid, nodes[b]], origin))
    g = RoadGraph(nodes, tuple(edges), origin)
    for src in nodes:
        for dst in nodes:
            oracle = _brute_force_best(g, src, dst)
            if math.isinf(oracle):
                with pytest.raises(NoRouteError):
                    shortest_route(g, src, dst)
            else:
                assert route_weight(g, shortest_route(g, src, dst)) == pytest.approx(oracle, rel=1e-12, abs=1e-9)
