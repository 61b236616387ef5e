import json

import pytest

from swarmsched.bench import (
    BenchRow,
    default_region_count,
    run_bench,
    save_report,
    synthetic_cluster,
)
from swarmsched.topology import layer_capacity, validate_snapshot


class TestSyntheticCluster:
    def test_deterministic_per_seed(self):
        a, _ = synthetic_cluster(16, seed=3)
        b, _ = synthetic_cluster(16, seed=3)
        c, _ = synthetic_cluster(16, seed=4)
        assert a.gpus == b.gpus
        assert a.gpus != c.gpus

    def test_shape_and_validity(self):
        cluster, _ = synthetic_cluster(32, seed=0)
        validate_snapshot(cluster)
        assert len(cluster.gpus) == 32
        assert len(cluster.regions) == default_region_count(32)
        # round-robin keeps regions near-equal
        sizes = [len(cluster.gpus_in_region(r)) for r in sorted(cluster.regions)]
        assert max(sizes) - min(sizes) <= 1

    def test_capacities_land_in_the_advertised_range(self):
        from swarmsched.bench import _CAPACITY_RANGE

        cluster, model = synthetic_cluster(64, seed=1)
        lo, hi = _CAPACITY_RANGE
        for gpu in cluster.gpus:
            assert lo <= layer_capacity(gpu, model) <= hi

    def test_intra_region_links_all_present(self):
        cluster, _ = synthetic_cluster(16, seed=2)
        for region in cluster.regions:
            members = cluster.gpus_in_region(region)
            for a in members:
                for b in members:
                    if a.id != b.id:
                        assert cluster.rtt_s(a.id, b.id) == pytest.approx(0.001)


class TestRegionScaling:
    def test_region_count_schedule(self):
        assert default_region_count(4) == 1
        assert default_region_count(8) == 1
        assert default_region_count(16) == 2
        assert default_region_count(32) == 4
        assert default_region_count(256) == 4


class TestBenchRow:
    def test_edge_predictor(self):
        row = BenchRow(
            gpu_count=8,
            region_count=1,
            layer_count=48,
            replication_count=2,
            allocate_ms=1.0,
            route_ms=0.1,
            routings=10,
            dag_nodes=96,
            dag_edges=150,
        )
        assert row.mean_hosts_per_layer == pytest.approx(2.0)
        assert row.predicted_edges == pytest.approx(48 * 4)
        json.dumps(row.to_dict())


class TestRunBench:
    def test_small_sweep_produces_sane_rows(self, tmp_path):
        report = run_bench((4, 8), seed=0, routings=3)
        assert [row.gpu_count for row in report.rows] == [4, 8]
        for row in report.rows:
            assert row.allocate_ms > 0
            assert row.route_ms > 0
            assert row.replication_count >= 1
            assert row.dag_nodes >= row.layer_count
            # measured edges within 2x of the density predictor
            assert row.dag_edges <= 2 * row.predicted_edges
            assert row.dag_edges >= row.predicted_edges / 2
        path = str(tmp_path / "bench.json")
        save_report(report, path)
        on_disk = json.loads(open(path).read())
        assert [r["gpu_count"] for r in on_disk["rows"]] == [4, 8]
