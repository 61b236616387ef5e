import json

import pytest

from swarmsched.cli import main
from swarmsched.sim import load_trace
from swarmsched.topology import cluster_to_dict, model_to_dict
from swarmsched.plan import load_plan

from helpers import TEST_MODEL, gpu_with_capacity, linked_cluster


@pytest.fixture
def files(tmp_path):
    cluster = linked_cluster(
        [
            gpu_with_capacity("a", 6),
            gpu_with_capacity("b", 5),
            gpu_with_capacity("c", 5),
            gpu_with_capacity("d", 4),
        ]
    )
    cluster_path = tmp_path / "cluster.json"
    cluster_path.write_text(json.dumps(cluster_to_dict(cluster)))
    model_path = tmp_path / "model.json"
    model_path.write_text(json.dumps(model_to_dict(TEST_MODEL)))
    return {
        "tmp": tmp_path,
        "cluster": str(cluster_path),
        "model": str(model_path),
    }


def _common(files):
    return ["--cluster", files["cluster"], "--model", files["model"]]


class TestAllocate:
    def test_plain_output_and_exit_zero(self, files, capsys):
        assert main(["allocate", *_common(files)]) == 0
        out = capsys.readouterr().out
        assert "replicas  : 2" in out
        assert "pipeline" in out

    def test_json_output_parses(self, files, capsys):
        assert main(["allocate", *_common(files), "--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["k"] == 2
        assert len(payload["pipelines"]) == 2
        assert {entry["k"] for entry in payload["per_k"]} == {1, 2}

    def test_out_writes_a_loadable_plan(self, files, capsys):
        plan_path = str(files["tmp"] / "plan.json")
        assert main(["allocate", *_common(files), "--out", plan_path]) == 0
        plan = load_plan(plan_path)
        assert plan.replication_count == 2

    def test_infeasible_cluster_exits_three(self, files, tmp_path, capsys):
        small = linked_cluster([gpu_with_capacity("only", 3)])
        path = tmp_path / "small.json"
        path.write_text(json.dumps(cluster_to_dict(small)))
        code = main(["allocate", "--cluster", str(path), "--model", files["model"]])
        assert code == 3
        assert "error:" in capsys.readouterr().err

    def test_missing_file_exits_two(self, files, capsys):
        code = main(
            ["allocate", "--cluster", "/nonexistent.json", "--model", files["model"]]
        )
        assert code == 2

    def test_malformed_cluster_exits_two(self, files, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"gpus": [{"id": "x"}]}))
        code = main(["allocate", "--cluster", str(bad), "--model", files["model"]])
        assert code == 2

    def test_wrong_shape_cluster_exits_two(self, files, tmp_path, capsys):
        # "gpus" holding a string used to escape as a bare TypeError
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"gpus": "nope"}))
        code = main(["allocate", "--cluster", str(bad), "--model", files["model"]])
        assert code == 2
        assert "not a valid cluster file" in capsys.readouterr().err


class TestRoute:
    def test_routes_requested_count(self, files, capsys):
        assert main(["route", *_common(files), "--requests", "3", "--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert len(payload["chains"]) == 3
        for chain in payload["chains"]:
            hops = chain["hops"]
            assert hops[0]["start_layer"] == 1
            assert hops[-1]["end_layer"] == TEST_MODEL.layer_count
            assert chain["cost_s"] > 0

    def test_accepts_pregenerated_plan(self, files, capsys):
        plan_path = str(files["tmp"] / "plan.json")
        main(["allocate", *_common(files), "--out", plan_path])
        capsys.readouterr()
        assert main(["route", *_common(files), "--plan", plan_path]) == 0
        assert "request 1:" in capsys.readouterr().out


class TestGenTraceAndSimulate:
    def test_gen_trace_then_simulate(self, files, capsys):
        trace_path = str(files["tmp"] / "trace.jsonl")
        code = main(
            [
                "gen-trace",
                "--rate",
                "20",
                "--duration",
                "3",
                "--seed",
                "1",
                "--out",
                trace_path,
            ]
        )
        assert code == 0
        assert "wrote" in capsys.readouterr().out
        trace = load_trace(trace_path)
        assert trace

        metrics_path = str(files["tmp"] / "metrics.json")
        code = main(
            [
                "simulate",
                *_common(files),
                "--trace",
                trace_path,
                "--out",
                metrics_path,
                "--json",
            ]
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["submitted"] == len(trace)
        on_disk = json.loads(open(metrics_path).read())
        assert on_disk == payload

    def test_baseline_flag_switches_plan(self, files, capsys):
        trace_path = str(files["tmp"] / "trace.jsonl")
        main(["gen-trace", "--rate", "10", "--duration", "2", "--out", trace_path])
        capsys.readouterr()
        code = main(
            ["simulate", *_common(files), "--trace", trace_path, "--baseline", "--json"]
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["submitted"] > 0

    def test_baseline_and_plan_conflict(self, files, capsys):
        trace_path = str(files["tmp"] / "trace.jsonl")
        main(["gen-trace", "--rate", "10", "--duration", "2", "--out", trace_path])
        plan_path = str(files["tmp"] / "plan.json")
        main(["allocate", *_common(files), "--out", plan_path])
        capsys.readouterr()
        code = main(
            [
                "simulate",
                *_common(files),
                "--trace",
                trace_path,
                "--plan",
                plan_path,
                "--baseline",
            ]
        )
        assert code == 2

    def test_deterministic_metrics_across_runs(self, files, capsys):
        trace_path = str(files["tmp"] / "trace.jsonl")
        main(["gen-trace", "--rate", "30", "--duration", "2", "--out", trace_path])
        capsys.readouterr()
        outputs = []
        for _ in range(2):
            assert (
                main(["simulate", *_common(files), "--trace", trace_path, "--json"])
                == 0
            )
            outputs.append(capsys.readouterr().out)
        assert outputs[0] == outputs[1]

    def test_membership_events_file(self, files, capsys):
        trace_path = str(files["tmp"] / "trace.jsonl")
        main(["gen-trace", "--rate", "20", "--duration", "3", "--out", trace_path])
        events_path = files["tmp"] / "events.jsonl"
        events_path.write_text(
            json.dumps({"t": 1.0, "event": "leave", "gpu_id": "d"}) + "\n"
        )
        capsys.readouterr()
        code = main(
            [
                "simulate",
                *_common(files),
                "--trace",
                trace_path,
                "--events",
                str(events_path),
                "--json",
            ]
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["submitted"] == payload["completed"] + payload["unserved"]


class TestDumpPerf:
    def test_lists_all_three_key_families(self, files, capsys):
        assert main(["dump-perf", *_common(files)]) == 0
        out = capsys.readouterr().out
        assert "layer_latency" in out
        assert "link_rtt" in out
        assert "node_attr" in out

    def test_expired_view_is_empty(self, files, capsys):
        assert main(["dump-perf", *_common(files), "--at", "1e6", "--json"]) == 0
        assert json.loads(capsys.readouterr().out) == []

    def test_json_rows_carry_all_families(self, files, capsys):
        assert main(["dump-perf", *_common(files), "--json"]) == 0
        rows = json.loads(capsys.readouterr().out)
        kinds = {row["kind"] for row in rows}
        assert kinds == {"layer_latency", "link_rtt", "node_attr"}


class TestBench:
    def test_tiny_sizes_report(self, capsys):
        code = main(["bench", "--sizes", "4,8", "--routings", "5", "--json"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert [row["gpu_count"] for row in payload["rows"]] == [4, 8]
        for row in payload["rows"]:
            assert row["allocate_ms"] > 0
            assert row["route_ms"] > 0


class TestConfigPlumbing:
    def test_config_file_changes_behaviour(self, files, tmp_path, capsys):
        cfg = tmp_path / "run.toml"
        cfg.write_text("alpha = 0.2\n")
        assert main(["allocate", *_common(files), "--config", str(cfg), "--json"]) == 0
        with_cfg = json.loads(capsys.readouterr().out)
        assert main(["allocate", *_common(files), "--json"]) == 0
        without = json.loads(capsys.readouterr().out)
        # damping replication hard enough flips the choice to fewer replicas
        assert with_cfg["k"] <= without["k"]
        assert with_cfg["per_k"] != without["per_k"]

    def test_alpha_flag_beats_config(self, files, tmp_path, capsys):
        cfg = tmp_path / "run.toml"
        cfg.write_text("alpha = 0.2\n")
        assert (
            main(
                [
                    "allocate",
                    *_common(files),
                    "--config",
                    str(cfg),
                    "--alpha",
                    "1.0",
                    "--json",
                ]
            )
            == 0
        )
        flagged = json.loads(capsys.readouterr().out)
        assert main(["allocate", *_common(files), "--json"]) == 0
        default = json.loads(capsys.readouterr().out)
        assert flagged == default

    def test_bad_config_exits_two(self, files, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("warp_factor = 9\n")
        assert main(["allocate", *_common(files), "--config", str(cfg)]) == 2
