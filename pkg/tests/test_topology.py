import json
import math
import random

import pytest

from swarmsched.errors import InvalidCluster
from swarmsched.topology import (
    ClusterSnapshot,
    GpuNode,
    LayerSlice,
    ModelSpec,
    cluster_from_dict,
    cluster_to_dict,
    layer_capacity,
    load_cluster,
    load_model,
    model_from_dict,
    model_to_dict,
    snapshot_violations,
    total_capacity,
    validate_snapshot,
)

from helpers import gpu_with_capacity, linked_cluster


def _gpu(vram, reserve, gpu_id="g", flops=1e14, region="east"):
    return GpuNode(
        id=gpu_id, region=region, vram_bytes=vram, flops=flops, reserve_fraction=reserve
    )


def _model(bytes_per_layer, layers=10):
    return ModelSpec(
        name="m",
        layer_count=layers,
        bytes_per_layer=bytes_per_layer,
        flops_per_layer_per_token=1e10,
    )


class TestLayerCapacity:
    def test_reserve_carved_out_before_flooring(self):
        assert layer_capacity(_gpu(24e9, 0.2), _model(1.2e9)) == 16

    def test_too_small_for_one_layer(self):
        assert layer_capacity(_gpu(1e9, 0.2), _model(2e9)) == 0

    def test_exact_multiple_not_lost_to_float_dust(self):
        # 32e9 * 0.9 / 0.9e9 is exactly 32 in real arithmetic but lands a
        # hair under in floats; the epsilon guard must absorb that.
        assert layer_capacity(_gpu(32e9, 0.1), _model(0.9e9)) == 32

    def test_never_negative(self):
        assert layer_capacity(_gpu(0.0, 0.0), _model(1e9)) == 0

    def test_matches_real_arithmetic_on_constructed_cases(self):
        rng = random.Random(1001)
        for _ in range(1000):
            cap = rng.randint(0, 64)
            reserve = rng.choice([0.0, 0.1, 0.2, 0.25, 0.5])
            bpl = rng.choice([0.5e9, 0.9e9, 1.0e9, 1.2e9, 2.0e9])
            # vram sized so usable / bpl == cap exactly
            vram = cap * bpl / (1.0 - reserve)
            assert layer_capacity(_gpu(vram, reserve), _model(bpl)) == cap


class TestValidation:
    def test_duplicate_ids_and_negative_rtt_both_reported(self):
        snap = ClusterSnapshot(
            gpus=(_gpu(8e9, 0.2, "a"), _gpu(8e9, 0.2, "a")),
            links={("a", "b"): -0.5},
        )
        problems = snapshot_violations(snap)
        assert len(problems) == 2
        with pytest.raises(InvalidCluster):
            validate_snapshot(snap)

    def test_declared_regions_must_cover_gpus(self):
        snap = ClusterSnapshot(
            gpus=(_gpu(8e9, 0.2, "a", region="east"),),
            regions=frozenset({"west"}),
        )
        assert len(snapshot_violations(snap)) == 1

    def test_regions_derived_when_not_declared(self):
        snap = ClusterSnapshot(
            gpus=(_gpu(8e9, 0.2, "a", region="east"), _gpu(8e9, 0.2, "b", region="west"))
        )
        assert snap.regions == frozenset({"east", "west"})
        assert snapshot_violations(snap) == []


class TestRttLookup:
    def test_same_gpu_is_free(self):
        snap = ClusterSnapshot(gpus=(_gpu(8e9, 0.2, "a"),))
        assert snap.rtt_s("a", "a") == 0.0

    def test_direct_then_reverse_then_default(self):
        snap = ClusterSnapshot(
            gpus=(_gpu(8e9, 0.2, "a"), _gpu(8e9, 0.2, "b"), _gpu(8e9, 0.2, "c")),
            links={("a", "b"): 0.002},
            default_cross_region_rtt_s=0.04,
        )
        assert snap.rtt_s("a", "b") == 0.002
        assert snap.rtt_s("b", "a") == 0.002  # symmetric fallback
        assert snap.rtt_s("a", "c") == 0.04

    def test_asymmetric_links_kept_when_both_declared(self):
        snap = ClusterSnapshot(
            gpus=(_gpu(8e9, 0.2, "a"), _gpu(8e9, 0.2, "b")),
            links={("a", "b"): 0.002, ("b", "a"): 0.003},
        )
        assert snap.rtt_s("a", "b") == 0.002
        assert snap.rtt_s("b", "a") == 0.003


class TestLayerSlice:
    def test_length_and_covers(self):
        sl = LayerSlice("g", 3, 7)
        assert sl.length == 5
        assert sl.covers(3) and sl.covers(7) and not sl.covers(8)

    def test_rejects_inverted_bounds(self):
        with pytest.raises(ValueError):
            LayerSlice("g", 5, 4)
        with pytest.raises(ValueError):
            LayerSlice("g", 0, 4)


class TestSerialization:
    def test_model_round_trip(self):
        model = _model(1.2e9, layers=48)
        assert model_from_dict(model_to_dict(model)) == model

    def test_wrong_shape_files_raise_value_error(self, tmp_path):
        # valid JSON, wrong shape: loaders must not leak TypeError/KeyError
        bad_cluster = tmp_path / "c.json"
        bad_cluster.write_text(json.dumps({"gpus": "nope"}))
        with pytest.raises(ValueError, match="not a valid cluster file"):
            load_cluster(str(bad_cluster))
        bad_model = tmp_path / "m.json"
        bad_model.write_text(json.dumps([1, 2, 3]))
        with pytest.raises(ValueError, match="not a valid model file"):
            load_model(str(bad_model))

    def test_cluster_round_trip_preserves_everything(self):
        rng = random.Random(77)
        for _ in range(50):
            gpus = [
                gpu_with_capacity(
                    f"g{i}",
                    rng.randint(1, 20),
                    region=rng.choice(["east", "west"]),
                    flops=rng.uniform(5e13, 2e14),
                    ram_token_capacity=rng.randint(1000, 200_000),
                )
                for i in range(rng.randint(1, 6))
            ]
            snap = linked_cluster(gpus)
            again = cluster_from_dict(cluster_to_dict(snap))
            assert again.gpus == snap.gpus
            assert again.regions == snap.regions
            assert again.default_cross_region_rtt_s == pytest.approx(
                snap.default_cross_region_rtt_s
            )
            for pair, rtt in snap.links.items():
                assert again.links[pair] == pytest.approx(rtt)

    def test_rtt_stored_as_milliseconds_on_disk(self):
        snap = ClusterSnapshot(
            gpus=(_gpu(8e9, 0.2, "a"), _gpu(8e9, 0.2, "b")),
            links={("a", "b"): 0.0015},
        )
        raw = cluster_to_dict(snap)
        assert raw["links"] == [{"from": "a", "to": "b", "rtt_ms": 1.5}]

    def test_from_dict_validates(self):
        raw = {
            "gpus": [
                {"id": "a", "region": "east", "vram_bytes": 8e9, "flops": 1e14},
                {"id": "a", "region": "east", "vram_bytes": 8e9, "flops": 1e14},
            ]
        }
        with pytest.raises(InvalidCluster):
            cluster_from_dict(raw)

    def test_cluster_dict_is_json_clean(self):
        snap = linked_cluster([gpu_with_capacity("a", 5), gpu_with_capacity("b", 5)])
        json.dumps(cluster_to_dict(snap))  # must not raise


def test_total_capacity_sums_individuals():
    model = _model(1e9)
    gpus = [gpu_with_capacity(f"g{i}", c, model=model) for i, c in enumerate([3, 0, 7])]
    assert total_capacity(gpus, model) == 10
