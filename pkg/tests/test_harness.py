"""Scenario harness: loading, validation, end-to-end runs, reports.

Expected values are derived by hand from the frame-timing formula
(capture ts of frame k = round(k * 1000 / fps), half rounding down), the
configured link delays, and the gating pipeline: the last frame of group g
leaves the publisher at publish_epoch + g*gop + last_frame_ts, crosses the
publisher uplink, reaches each analyzer over its downlink, and the approval
returns over the analyzer uplink before the stored group bursts across the
filtered subscriber's downlink.
"""

from __future__ import annotations

import copy
import json
import random

import pytest

from moqgate.harness import (
    Report,
    Scenario,
    ScenarioError,
    ScenarioTimeoutError,
    bundled_scenario_names,
    bundled_scenario_path,
    load_scenario,
    predict_bounds,
    run_scenario,
    scenario_from_dict,
    uncovered_filter_categories,
)

# ---------------------------------------------------------------------------
# scenario builders
# ---------------------------------------------------------------------------

ZERO_LINK = {"to_relay_ms": 0.0, "from_relay_ms": 0.0, "jitter_ms": 0.0}


def mini_scenario() -> dict:
    """fps 10, gop 1000 ms, constant source for 2000 ms -> 2 groups.

    Frame spacing is 100 ms; the last frame of each group is captured at
    g*1000 + 900.  With zero link delays and zero analysis time the analyzer
    completes group g at g*1000 + 900, approves instantly, and the burst
    reaches the filtered client at the same instant.  The analyzer first sees
    group g at g*1000, so the added latency of the filtered client is
    900 ms = gop - frame spacing.
    """
    return {
        "name": "mini",
        "track": "cam",
        "seed": 1,
        "publish_epoch_ms": 0.0,
        "source": {
            "width": 16,
            "height": 16,
            "fps": 10,
            "gop_duration_ms": 1000,
            "segments": [{"kind": "constant", "level": 128, "duration_ms": 2000}],
        },
        "links": {
            "publisher": dict(ZERO_LINK),
            "clients": {
                "analyzer0": dict(ZERO_LINK),
                "gated": dict(ZERO_LINK),
                "plain": dict(ZERO_LINK),
            },
        },
        "clients": [
            {"name": "analyzer0", "analyze": ["strobe"], "analysis_time_ms": 0.0},
            {"name": "gated", "filter": ["strobe"]},
            {"name": "plain"},
        ],
        "checks": {"added_latency_band_ms": [890.0, 910.0]},
    }


def impulse_scenario() -> dict:
    """fps 30, 3 groups; the middle second strobes at 15 Hz -> group 1 risky.

    30 fps frame times within a group run 0, 33, 67, ..., 967.  The strobe
    toggles every frame (half period 1 frame), so luma increases arrive
    66/67 ms apart -- well inside the 100 ms risk window.
    """
    return {
        "name": "impulse-mini",
        "track": "cam",
        "seed": 2,
        "source": {
            "width": 16,
            "height": 16,
            "fps": 30,
            "gop_duration_ms": 1000,
            "segments": [
                {"kind": "constant", "level": 128, "duration_ms": 1000},
                {"kind": "strobe", "low": 16, "high": 240, "flash_hz": 15.0, "duration_ms": 1000},
                {"kind": "constant", "level": 128, "duration_ms": 1000},
            ],
        },
        "links": {
            "publisher": dict(ZERO_LINK),
            "clients": {
                "analyzer0": dict(ZERO_LINK),
                "gated": dict(ZERO_LINK),
                "plain": dict(ZERO_LINK),
            },
        },
        "clients": [
            {"name": "analyzer0", "analyze": ["strobe"]},
            {"name": "gated", "filter": ["strobe"]},
            {"name": "plain"},
        ],
        "checks": {},
    }


def run_report(data: dict) -> Report:
    return run_scenario(scenario_from_dict(data))


def checks_by_name(report: Report) -> dict[str, bool]:
    return {c["name"]: c["passed"] for c in report.data["checks"]}


# ---------------------------------------------------------------------------
# loading and validation
# ---------------------------------------------------------------------------


class TestScenarioLoading:
    def test_minimal_scenario_loads_with_defaults(self):
        data = {
            "name": "tiny",
            "track": "t",
            "source": {
                "width": 4,
                "height": 4,
                "fps": 10,
                "gop_duration_ms": 1000,
                "segments": [{"kind": "constant", "level": 5, "duration_ms": 1000}],
            },
            "links": {"publisher": dict(ZERO_LINK), "clients": {"viewer": dict(ZERO_LINK)}},
            "clients": [{"name": "viewer"}],
        }
        sc = scenario_from_dict(data)
        assert isinstance(sc, Scenario)
        assert sc.seed == 0
        assert sc.publish_epoch_ms == 0.0
        assert sc.duration_ms == 600_000.0
        assert sc.retention_groups == 64
        assert sc.playback_buffer_groups == 1.0
        assert sc.delay_draws is None
        viewer = sc.clients[0]
        assert viewer.analyze == () and viewer.filter == ()
        assert viewer.link.jitter_ms == 0.0
        # detector defaults
        assert viewer.detector.grid_dim == 16
        assert viewer.detector.pixel_delta_threshold == 20
        assert viewer.detector.changed_fraction_threshold == 0.25
        assert viewer.detector.max_interchange_gap_ms == 100.0

    def test_bundled_fixture_names_and_loading(self):
        assert bundled_scenario_names() == [
            "multi_category",
            "paper_replication",
            "random_delays",
            "strobe_impulse",
        ]
        for name in bundled_scenario_names():
            sc = load_scenario(bundled_scenario_path(name))
            assert sc.name == name

    def test_filter_without_covering_analyzer_rejected(self):
        data = mini_scenario()
        data["clients"][1]["filter"] = ["strobe", "smoking"]
        with pytest.raises(ScenarioError) as ei:
            scenario_from_dict(data)
        assert "smoking" in str(ei.value)
        assert "gated" in str(ei.value)
        assert "strobe" not in str(ei.value)  # strobe IS covered

    def test_analyze_and_filter_on_same_client_rejected(self):
        data = mini_scenario()
        data["clients"][0]["filter"] = ["strobe"]
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_unknown_keys_rejected(self):
        data = mini_scenario()
        data["surprise"] = 1
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)
        data = mini_scenario()
        data["clients"][2]["surprise"] = 1
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)
        data = mini_scenario()
        data["links"]["clients"]["ghost"] = dict(ZERO_LINK)
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_client_without_link_rejected(self):
        data = mini_scenario()
        del data["links"]["clients"]["plain"]
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_unknown_category_name_rejected(self):
        data = mini_scenario()
        data["clients"][0]["analyze"] = ["smoke"]
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_empty_role_list_rejected(self):
        data = mini_scenario()
        data["clients"][0]["analyze"] = []
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_duplicate_client_names_rejected(self):
        data = mini_scenario()
        data["clients"][2]["name"] = "gated"
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_unknown_check_rejected(self):
        data = mini_scenario()
        data["checks"] = {"bogus": 1}
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_delay_draws_validation(self):
        data = mini_scenario()
        data["delay_draws"] = {"count": 0, "seed": 1, "min_ms": 0, "max_ms": 5}
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)
        data["delay_draws"] = {"count": 2, "seed": 1, "min_ms": 7, "max_ms": 5}
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_detector_overrides_merge(self):
        data = mini_scenario()
        data["detector"] = {"pixel_delta_threshold": 30}
        data["clients"][0]["detector"] = {"grid_dim": 8}
        sc = scenario_from_dict(data)
        analyzer = sc.clients[0]
        assert analyzer.detector.pixel_delta_threshold == 30
        assert analyzer.detector.grid_dim == 8
        # non-analyzer clients still get the scenario-level config
        assert sc.clients[1].detector.pixel_delta_threshold == 30
        data["detector"] = {"nope": 1}
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_coverage_validation_matches_bruteforce(self):
        """Random role assignments: load succeeds iff a brute-force scan over
        (filter client x category) finds no category missing an analyzer."""
        names = ["strobe", "smoking", "alcohol"]
        rng = random.Random(2024)
        for trial in range(60):
            clients = []
            links = {}
            for i in range(rng.randint(0, 2)):
                cats = rng.sample(names, rng.randint(1, 3))
                clients.append({"name": f"an{i}", "analyze": cats})
            for i in range(rng.randint(0, 2)):
                cats = rng.sample(names, rng.randint(1, 3))
                clients.append({"name": f"fi{i}", "filter": cats})
            clients.append({"name": "plain"})
            for c in clients:
                links[c["name"]] = dict(ZERO_LINK)
            data = mini_scenario()
            data["clients"] = clients
            data["links"]["clients"] = links
            data["checks"] = {}

            analyzed = set()
            for c in clients:
                analyzed.update(c.get("analyze", []))
            expected_uncovered = {
                (c["name"], cat)
                for c in clients
                for cat in c.get("filter", [])
                if cat not in analyzed
            }

            assert uncovered_filter_categories(data["clients"]) == expected_uncovered
            if expected_uncovered:
                with pytest.raises(ScenarioError) as ei:
                    scenario_from_dict(data)
                for _, cat in expected_uncovered:
                    assert cat in str(ei.value)
            else:
                scenario_from_dict(data)


# ---------------------------------------------------------------------------
# end-to-end runs on inline mini scenarios
# ---------------------------------------------------------------------------


class TestRunScenario:
    def test_zero_delay_records(self):
        report = run_report(mini_scenario())
        run = report.data["runs"][0]
        an = run["records"]["analyzer0"]
        assert [r["group_id"] for r in an] == [0, 1]
        assert an[0]["first_arrival_ms"] == 0.0
        assert an[0]["complete_arrival_ms"] == 900.0
        assert an[0]["frame_count"] == 10
        assert an[1]["first_arrival_ms"] == 1000.0
        assert an[1]["complete_arrival_ms"] == 1900.0

        gated = run["records"]["gated"]
        assert gated[0]["first_arrival_ms"] == 900.0
        assert gated[0]["complete_arrival_ms"] == 900.0
        assert gated[0]["added_ms"] == 900.0
        assert gated[0]["e2e_ms"] == 900.0
        assert gated[1]["complete_arrival_ms"] == 1900.0
        assert gated[1]["added_ms"] == 900.0
        assert gated[1]["e2e_ms"] == 900.0
        assert an[0]["added_ms"] is None

        plain = run["records"]["plain"]
        assert plain[0]["complete_arrival_ms"] == 900.0
        assert run["delivered"]["gated"] == [0, 1]
        assert run["skipped"]["gated"] == []
        assert run["delivered"]["plain"] == [0, 1]

    def test_zero_delay_checks_pass(self):
        report = run_report(mini_scenario())
        assert report.passed is True
        verdicts = checks_by_name(report)
        assert verdicts == {
            "added_latency_band": True,
            "latency_bound": True,
            "gating_safety": True,
            "approval_audit": True,
            "realtime_analysis": True,
        }
        bounds = report.data["runs"][0]["bounds"]["gated"]
        assert bounds["predicted_ms"] == 1000.0
        assert bounds["max_observed_e2e_ms"] == 900.0
        assert bounds["max_added_ms"] == 900.0
        # playback: zero-delay arrivals never stall
        playback = report.data["runs"][0]["playback"]["gated"]
        assert playback["start_ms"] == 1900.0  # first complete + one-group buffer
        assert playback["stalls"] == []

    def test_band_check_fails_when_out_of_band(self):
        data = mini_scenario()
        data["checks"] = {"added_latency_band_ms": [0.0, 10.0]}
        report = run_report(data)
        assert report.passed is False
        verdicts = checks_by_name(report)
        assert verdicts["added_latency_band"] is False
        assert verdicts["gating_safety"] is True
        assert verdicts["latency_bound"] is True

    def test_impulse_gating_and_skip(self):
        report = run_report(impulse_scenario())
        assert report.passed is True
        run = report.data["runs"][0]
        assert run["delivered"]["gated"] == [0, 2]
        assert run["skipped"]["gated"] == [1]
        assert run["delivered"]["analyzer0"] == [0, 1, 2]
        assert run["delivered"]["plain"] == [0, 1, 2]
        gated = run["records"]["gated"]
        # 30 fps: last frame of a group is captured at g*1000 + 967
        assert gated[0]["complete_arrival_ms"] == 967.0
        assert gated[1]["group_id"] == 2
        assert gated[1]["complete_arrival_ms"] == 2967.0

    def test_realtime_violation_fails_report(self):
        data = mini_scenario()
        data["checks"] = {}
        data["clients"][0]["analysis_time_ms"] = 1500.0
        report = run_report(data)
        assert report.passed is False
        verdicts = checks_by_name(report)
        assert verdicts["realtime_analysis"] is False
        assert verdicts["gating_safety"] is True
        assert verdicts["latency_bound"] is True  # bound includes analysis time
        run = report.data["runs"][0]
        # approvals land late but in order: complete + 1500 ms
        assert run["records"]["gated"][0]["complete_arrival_ms"] == 2400.0
        assert run["delivered"]["gated"] == [0, 1]

    def test_stub_rejection_blocks_everything(self):
        data = mini_scenario()
        data["checks"] = {}
        data["clients"] = [
            {"name": "analyzer0", "analyze": ["smoking"]},
            {"name": "gated_smoke", "filter": ["smoking"]},
        ]
        data["links"]["clients"] = {
            "analyzer0": dict(ZERO_LINK),
            "gated_smoke": dict(ZERO_LINK),
        }
        data["stub_verdicts"] = {"smoking": False}
        report = run_report(data)
        assert report.passed is True
        run = report.data["runs"][0]
        assert run["delivered"]["gated_smoke"] == []
        assert run["skipped"]["gated_smoke"] == [0, 1]
        assert run["playback"]["gated_smoke"]["start_ms"] is None

    def test_report_json_bytes_identical_across_runs(self):
        data = mini_scenario()
        first = run_report(copy.deepcopy(data)).to_json()
        second = run_report(copy.deepcopy(data)).to_json()
        assert first == second
        parsed = json.loads(first)
        assert parsed["passed"] is True

    def test_jitter_is_seeded_and_deterministic(self):
        data = mini_scenario()
        data["checks"] = {}
        for spec in data["links"]["clients"].values():
            spec["jitter_ms"] = 2.0
        first = run_report(copy.deepcopy(data))
        second = run_report(copy.deepcopy(data))
        assert first.to_json() == second.to_json()
        assert first.passed is True

    def test_csv_rows_cover_groups_times_clients(self):
        report = run_report(mini_scenario())
        lines = report.to_csv().strip().splitlines()
        header = lines[0].split(",")
        assert header == [
            "run",
            "client",
            "group_id",
            "status",
            "first_arrival_ms",
            "complete_arrival_ms",
            "frame_count",
            "e2e_ms",
            "added_ms",
        ]
        assert len(lines) - 1 == 2 * 3  # groups x clients
        gated_row = next(l for l in lines[1:] if l.startswith("0,gated,0,"))
        cells = gated_row.split(",")
        assert cells[3] == "delivered"
        assert float(cells[5]) == 900.0
        assert float(cells[8]) == 900.0

    def test_csv_marks_skipped_groups(self):
        report = run_report(impulse_scenario())
        lines = report.to_csv().strip().splitlines()
        assert len(lines) - 1 == 3 * 3
        skipped_row = next(l for l in lines[1:] if l.startswith("0,gated,1,"))
        cells = skipped_row.split(",")
        assert cells[3] == "skipped"
        assert cells[4] == "" and cells[5] == "" and cells[8] == ""

    def test_text_render_has_check_lines(self):
        good = run_report(mini_scenario()).to_text()
        assert "[PASS] added_latency_band" in good
        assert "[PASS] gating_safety" in good
        assert "RESULT: PASSED" in good
        data = mini_scenario()
        data["checks"] = {"added_latency_band_ms": [0.0, 10.0]}
        bad = run_report(data).to_text()
        assert "[FAIL] added_latency_band" in bad
        assert "RESULT: FAILED" in bad

    def test_delay_draws_run_per_draw(self):
        data = mini_scenario()
        data["checks"] = {}
        data["delay_draws"] = {"count": 3, "seed": 9, "min_ms": 1, "max_ms": 9}
        report = run_report(copy.deepcopy(data))
        assert report.passed is True
        runs = report.data["runs"]
        assert [r["run"] for r in runs] == [0, 1, 2]
        seen = set()
        for run in runs:
            links = run["links"]
            values = [links["publisher"]["to_relay_ms"], links["publisher"]["from_relay_ms"]]
            for name in ("analyzer0", "gated", "plain"):
                values.append(links["clients"][name]["to_relay_ms"])
                values.append(links["clients"][name]["from_relay_ms"])
            assert all(1 <= v <= 9 and float(v).is_integer() for v in values)
            seen.add(tuple(values))
        assert len(seen) > 1  # draws actually vary
        again = run_report(copy.deepcopy(data))
        assert again.to_json() == report.to_json()

    def test_virtual_time_cap_yields_partial_report(self):
        data = mini_scenario()
        data["duration_ms"] = 500.0
        with pytest.raises(ScenarioTimeoutError) as ei:
            run_report(data)
        partial = ei.value.report
        assert partial.data["timeout"] is True
        assert partial.passed is False


# ---------------------------------------------------------------------------
# bundled fixtures
# ---------------------------------------------------------------------------


class TestBundledFixtures:
    def test_paper_replication_adds_one_group_of_latency(self):
        report = run_scenario(load_scenario(bundled_scenario_path("paper_replication")))
        assert report.passed is True
        run = report.data["runs"][0]
        gated = run["records"]["gated"]
        assert [r["group_id"] for r in gated] == list(range(10))
        # 200 fps: last frame at g*1000 + 995; zero link delay, zero analysis
        for r in gated:
            assert r["added_ms"] == 995.0
            assert r["e2e_ms"] == 995.0
        bounds = run["bounds"]["gated"]
        assert bounds["predicted_ms"] == 1000.0
        assert bounds["max_observed_e2e_ms"] == 995.0

    def test_strobe_impulse_skips_risky_groups(self):
        report = run_scenario(load_scenario(bundled_scenario_path("strobe_impulse")))
        assert report.passed is True
        run = report.data["runs"][0]
        assert run["delivered"]["gated"] == [0, 1, 2, 3, 6, 7, 8, 9]
        assert run["skipped"]["gated"] == [4, 5]
        assert run["delivered"]["analyzer0"] == list(range(10))
        assert run["delivered"]["plain"] == list(range(10))
        # pub uplink 10 + downlink 5 puts first frame at 15; last frame lands
        # at 982; approve (5 ms analysis) reaches relay at 992; burst at 997.
        gated = run["records"]["gated"]
        assert gated[0]["complete_arrival_ms"] == 997.0
        assert gated[0]["added_ms"] == 982.0
        # the two skipped groups stall playback for exactly their duration
        playback = run["playback"]["gated"]
        assert playback["start_ms"] == 1997.0
        assert playback["stalls"] == [[5997.0, 1000.0]]
        assert playback["total_stall_ms"] == 1000.0

    def test_multi_category_approves_only_safe_category(self):
        report = run_scenario(load_scenario(bundled_scenario_path("multi_category")))
        assert report.passed is True
        run = report.data["runs"][0]
        assert run["delivered"]["filter_smoke"] == [0, 1, 2]
        assert run["delivered"]["filter_strobe"] == []
        assert run["skipped"]["filter_strobe"] == [0, 1, 2]
        assert run["delivered"]["plain"] == [0, 1, 2]
        # every approval carried the smoking category only (code 2)
        approvals = run["approvals"]["analyzer0"]
        assert approvals == [[0, [2]], [1, [2]], [2, [2]]]

    def test_random_delays_hold_the_latency_bound(self):
        report = run_scenario(load_scenario(bundled_scenario_path("random_delays")))
        assert report.passed is True
        runs = report.data["runs"]
        assert len(runs) == 20
        for run in runs:
            bounds = run["bounds"]["gated"]
            assert bounds["max_observed_e2e_ms"] <= bounds["predicted_ms"] + 2.0
            # 125 fps: the last frame leaves one spacing (8 ms) before the
            # group boundary, so the bound is met with exactly 8 ms to spare
            assert bounds["predicted_ms"] - bounds["max_observed_e2e_ms"] == 8.0

    def test_predict_bounds(self):
        assert predict_bounds(load_scenario(bundled_scenario_path("paper_replication"))) == {
            "gated": 1000.0
        }
        # gop 1000 + pub 10 + analyzer down 5 + analyzer up 5 + analysis 12 + sub down 5
        assert predict_bounds(load_scenario(bundled_scenario_path("random_delays"))) == {
            "gated": 1037.0
        }
        assert predict_bounds(load_scenario(bundled_scenario_path("multi_category"))) == {
            "filter_smoke": 1000.0,
            "filter_strobe": 1000.0,
        }
