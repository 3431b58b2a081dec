import math

import numpy as np
import pytest

from moeup import upcycle
from moeup.checkpoint import ffn_slot_names
from moeup.config import ValidationError
from moeup.model import FfnWeights, ffn_forward, moe_forward
from moeup.numerics import RngStream

from conftest import make_config, random_checkpoint, tiny_dense_config, tiny_moe_config


def _layer_ffn(ckpt, layer):
    gate, up, down = ffn_slot_names(f"layers.{layer}.ffn")
    return FfnWeights(*(np.asarray(ckpt.tensors[n], dtype=np.float64)
                        for n in (gate, up, down)))


def _layer_moe_weights(ckpt, layer):
    from moeup.model import MoeLayerWeights

    config = ckpt.config
    experts = []
    for e in range(config.routed_experts):
        names = ffn_slot_names(f"layers.{layer}.experts.{e}")
        experts.append(FfnWeights(*(np.asarray(ckpt.tensors[n], dtype=np.float64)
                                    for n in names)))
    return MoeLayerWeights(
        router=np.asarray(ckpt.tensors[f"layers.{layer}.router"], dtype=np.float64),
        experts=tuple(experts))


def _non_ffn_names(ckpt):
    return [n for n in ckpt.tensors
            if ".ffn." not in n and ".experts." not in n
            and ".shared." not in n and not n.endswith(".router")]


class TestFromScratch:
    def test_large_tensor_std_matches_init(self):
        config = make_config(64, 512, 2, 4, 4, 500)
        ck = upcycle.from_scratch(config, seed=0)
        for name in ("embedding.token", "head.out", "layers.0.ffn.gate"):
            std = float(np.asarray(ck.tensors[name], dtype=np.float64).std())
            assert abs(std - 0.02) / 0.02 < 0.05, name

    def test_same_seed_reproduces(self):
        config = tiny_moe_config()
        a = upcycle.from_scratch(config, seed=5)
        b = upcycle.from_scratch(config, seed=5)
        for name in a.tensors:
            assert np.array_equal(a.tensors[name], b.tensors[name])

    def test_different_seeds_differ_everywhere(self):
        config = tiny_moe_config()
        a = upcycle.from_scratch(config, seed=5)
        b = upcycle.from_scratch(config, seed=6)
        for name in a.tensors:
            assert np.max(np.abs(a.tensors[name].astype(np.float64)
                                 - b.tensors[name].astype(np.float64))) > 0, name


class TestRouterInit:
    def test_bounds(self):
        config = tiny_moe_config(n=8, k=2)
        r = upcycle.router_init(config, RngStream(1))
        assert np.all(np.abs(r) <= 0.0346)

    def test_std_matches_gaussian_counterpart(self):
        config = make_config(512, 1024, 1, 8, 8, 50, n=8, k=2)
        r = upcycle.router_init(config, RngStream(2))
        assert abs(r.std() - 0.02) / 0.02 < 0.05

    def test_deterministic(self):
        config = tiny_moe_config()
        a = upcycle.router_init(config, RngStream(3, (1,)))
        b = upcycle.router_init(config, RngStream(3, (1,)))
        assert np.array_equal(a, b)


class TestNaive:
    def test_experts_are_bitwise_copies(self):
        dense = random_checkpoint(tiny_dense_config(), seed=1)
        moe = upcycle.naive_upcycle(dense, tiny_moe_config(), seed=2)
        for layer in range(2):
            parent = ffn_slot_names(f"layers.{layer}.ffn")
            for e in range(4):
                child = ffn_slot_names(f"layers.{layer}.experts.{e}")
                for src, dst in zip(parent, child):
                    assert np.array_equal(dense.tensors[src], moe.tensors[dst])

    def test_function_preserved(self):
        dense = random_checkpoint(tiny_dense_config(), seed=2)
        moe = upcycle.naive_upcycle(dense, tiny_moe_config(), seed=3)
        rng = np.random.default_rng(0)
        for layer in range(2):
            weights = _layer_moe_weights(moe, layer)
            parent = _layer_ffn(dense, layer)
            for _ in range(10):
                x = rng.normal(size=16)
                y, _, _ = moe_forward(weights, x, 2)
                assert np.max(np.abs(y - ffn_forward(parent, x))) < 1e-12

    def test_equals_drop_at_ratio_zero_outside_router(self):
        dense = random_checkpoint(tiny_dense_config(), seed=3)
        config = tiny_moe_config()
        naive = upcycle.naive_upcycle(dense, config, seed=4)
        dropped, _ = upcycle.drop_upcycle(
            dense, config, upcycle.UpcycleSpec(method="drop", ratio=0.0, seed=4))
        for name in naive.tensors:
            if name.endswith(".router"):
                continue
            assert np.array_equal(naive.tensors[name], dropped.tensors[name]), name

    def test_non_ffn_tensors_bitwise(self):
        dense = random_checkpoint(tiny_dense_config(), seed=4)
        moe = upcycle.naive_upcycle(dense, tiny_moe_config(), seed=5)
        for name in _non_ffn_names(dense):
            assert np.array_equal(dense.tensors[name], moe.tensors[name])


class TestRandomNoise:
    def test_zero_fraction_equals_naive(self):
        dense = random_checkpoint(tiny_dense_config(), seed=5)
        config = tiny_moe_config()
        spec = upcycle.UpcycleSpec(method="rnu", seed=6, noise_fraction=0.0)
        rnu = upcycle.random_noise_upcycle(dense, config, spec)
        naive = upcycle.naive_upcycle(dense, config, seed=6)
        for name in rnu.tensors:
            assert np.array_equal(rnu.tensors[name], naive.tensors[name]), name

    def test_perturbed_fraction_and_noise_std(self):
        config_d = make_config(64, 512, 1, 4, 4, 50)
        dense = random_checkpoint(config_d, seed=6)
        config = make_config(64, 512, 1, 4, 4, 50, n=2, k=1)
        spec = upcycle.UpcycleSpec(method="rnu", seed=7, noise_fraction=0.5,
                                   noise_sigma=0.02)
        rnu = upcycle.random_noise_upcycle(dense, config, spec)
        for e in range(2):
            for src, dst in zip(ffn_slot_names("layers.0.ffn"),
                                ffn_slot_names(f"layers.0.experts.{e}")):
                parent = dense.tensors[src].astype(np.float64)
                child = rnu.tensors[dst].astype(np.float64)
                delta = child - parent
                changed = delta != 0.0
                n = parent.size
                # Binomial bound on the Bernoulli(0.5) mask density.
                assert abs(changed.mean() - 0.5) < 4 * math.sqrt(0.25 / n)
                assert abs(delta[changed].std() - 0.02) / 0.02 < 0.05


class TestDrop:
    def test_ratio_zero_is_pure_copy(self):
        dense = random_checkpoint(tiny_dense_config(), seed=7)
        moe, plan = upcycle.drop_upcycle(
            dense, tiny_moe_config(), upcycle.UpcycleSpec(method="drop", ratio=0.0, seed=8))
        for layer in range(2):
            for e in range(4):
                for src, dst in zip(ffn_slot_names(f"layers.{layer}.ffn"),
                                    ffn_slot_names(f"layers.{layer}.experts.{e}")):
                    assert np.array_equal(dense.tensors[src], moe.tensors[dst])
                assert plan.layers[layer].experts[e].dropped.size == 0

    def test_retention_counts_and_shared_index_set(self):
        d_f = 2048
        config_d = make_config(32, d_f, 1, 2, 2, 50)
        dense = random_checkpoint(config_d, seed=8)
        config = make_config(32, d_f, 1, 2, 2, 50, n=2, k=1)
        spec = upcycle.UpcycleSpec(method="drop", ratio=0.5, seed=9)
        moe, plan = upcycle.drop_upcycle(dense, config, spec)
        gate_p, up_p, down_p = (dense.tensors[n] for n in ffn_slot_names("layers.0.ffn"))
        for e in range(2):
            entry = plan.layers[0].experts[e]
            assert entry.dropped.size == math.floor(0.5 * d_f)
            retained = entry.retained_mask(d_f)
            gate_c, up_c, down_c = (moe.tensors[n]
                                    for n in ffn_slot_names(f"layers.0.experts.{e}"))
            # One shared index set across the three matrices: retained columns
            # of gate/up and rows of down are bitwise-original.
            assert np.array_equal(gate_c[:, retained], gate_p[:, retained])
            assert np.array_equal(up_c[:, retained], up_p[:, retained])
            assert np.array_equal(down_c[retained, :], down_p[retained, :])
            # Dropped columns were actually replaced.
            assert not np.array_equal(gate_c[:, ~retained], gate_p[:, ~retained])
            exact_cols = int(np.sum(np.all(gate_c == gate_p, axis=0)))
            assert exact_cols == d_f - math.floor(0.5 * d_f)

    def test_constant_columns_reproduce_constant(self):
        config_d = tiny_dense_config()
        dense = random_checkpoint(config_d, seed=9)
        c = np.float32(0.125)
        dense.tensors["layers.0.ffn.up"] = np.full_like(dense.tensors["layers.0.ffn.up"], c)
        moe, plan = upcycle.drop_upcycle(
            dense, tiny_moe_config(), upcycle.UpcycleSpec(method="drop", ratio=0.5, seed=10))
        for e in range(4):
            up_c = moe.tensors[f"layers.0.experts.{e}.up"]
            assert np.all(up_c == c)
            assert plan.layers[0].experts[e].stats["up"].sigma == 0.0

    def test_statistics_match_sampled_block(self):
        config_d = make_config(128, 1024, 1, 4, 4, 50)
        dense = random_checkpoint(config_d, seed=10)
        config = make_config(128, 1024, 1, 4, 4, 50, n=2, k=1)
        moe, plan = upcycle.drop_upcycle(
            dense, config, upcycle.UpcycleSpec(method="drop", ratio=0.5, seed=11))
        for e in range(2):
            entry = plan.layers[0].experts[e]
            dropped = entry.dropped
            for kind, src in zip(("gate", "up", "down"), ffn_slot_names("layers.0.ffn")):
                parent = dense.tensors[src].astype(np.float64)
                block = parent[:, dropped] if kind != "down" else parent[dropped, :]
                stats = entry.stats[kind]
                assert stats.mu == pytest.approx(float(block.mean()), abs=0)
                assert stats.sigma == pytest.approx(float(block.std()), abs=0)
                child = moe.tensors[f"layers.0.experts.{e}.{kind}"].astype(np.float64)
                new_block = child[:, dropped] if kind != "down" else child[dropped, :]
                n = new_block.size
                assert abs(new_block.mean() - stats.mu) < 4 * stats.sigma / math.sqrt(n)
                assert abs(new_block.std() - stats.sigma) / stats.sigma < 0.05

    def test_deterministic(self):
        dense = random_checkpoint(tiny_dense_config(), seed=11)
        spec = upcycle.UpcycleSpec(method="drop", ratio=0.5, seed=12)
        a, plan_a = upcycle.drop_upcycle(dense, tiny_moe_config(), spec)
        b, plan_b = upcycle.drop_upcycle(dense, tiny_moe_config(), spec)
        for name in a.tensors:
            assert np.array_equal(a.tensors[name], b.tensors[name])
        assert plan_a.to_json_dict() == plan_b.to_json_dict()

    def test_plan_round_trip(self, tmp_path):
        dense = random_checkpoint(tiny_dense_config(), seed=12)
        _, plan = upcycle.drop_upcycle(
            dense, tiny_moe_config(), upcycle.UpcycleSpec(method="drop", ratio=0.3, seed=13))
        upcycle.save_plan(plan, tmp_path)
        loaded = upcycle.load_plan(tmp_path)
        assert loaded.to_json_dict() == plan.to_json_dict()

    def test_ratio_out_of_range_names_field(self):
        with pytest.raises(ValidationError, match="ratio"):
            upcycle.UpcycleSpec(method="drop", ratio=1.5)

    def test_metadata_provenance(self):
        dense = random_checkpoint(tiny_dense_config(), seed=13)
        moe, _ = upcycle.drop_upcycle(
            dense, tiny_moe_config(), upcycle.UpcycleSpec(method="drop", ratio=0.5, seed=14))
        from moeup.checkpoint import checkpoint_hash

        assert moe.metadata["method"] == "drop"
        assert moe.metadata["ratio"] == 0.5
        assert moe.metadata["seed"] == 14
        assert moe.metadata["parent_hash"] == checkpoint_hash(dense)


class TestBtx:
    def test_identical_inputs_average_to_same(self):
        dense = random_checkpoint(tiny_dense_config(), seed=14)
        config = tiny_moe_config(n=8, k=2)
        merged = upcycle.btx_merge(dense, [dense, dense, dense], config, seed=15)
        for name in _non_ffn_names(dense):
            assert np.allclose(merged.tensors[name], dense.tensors[name], rtol=0, atol=0)
        first = [merged.tensors[f"layers.0.experts.0.{k}"] for k in ("gate", "up", "down")]
        for e in range(1, 8):
            for kind, ref in zip(("gate", "up", "down"), first):
                assert np.array_equal(merged.tensors[f"layers.0.experts.{e}.{kind}"], ref)

    def test_non_ffn_average(self):
        a = random_checkpoint(tiny_dense_config(), seed=15)
        b = random_checkpoint(tiny_dense_config(), seed=16)
        a.tensors["layers.0.attn.wq"] = np.zeros_like(a.tensors["layers.0.attn.wq"])
        b.tensors["layers.0.attn.wq"] = np.full_like(b.tensors["layers.0.attn.wq"], 2.0)
        merged = upcycle.btx_merge(a, [b], tiny_moe_config(n=4, k=2), seed=17)
        assert np.all(merged.tensors["layers.0.attn.wq"] == 1.0)

    def test_expert_duplication_order(self):
        models = [random_checkpoint(tiny_dense_config(), seed=17 + i) for i in range(4)]
        merged = upcycle.btx_merge(models[0], models[1:], tiny_moe_config(n=8, k=2), seed=18)
        for e in range(8):
            src = models[e // 2]
            for kind, parent_name in zip(("gate", "up", "down"),
                                         ffn_slot_names("layers.1.ffn")):
                assert np.array_equal(merged.tensors[f"layers.1.experts.{e}.{kind}"],
                                      src.tensors[parent_name])

    def test_wrong_expert_count_rejected(self):
        models = [random_checkpoint(tiny_dense_config(), seed=21 + i) for i in range(2)]
        with pytest.raises(ValidationError, match="num_experts"):
            upcycle.btx_merge(models[0], models[1:], tiny_moe_config(n=8, k=2), seed=19)

    def test_architecture_mismatch_rejected(self):
        a = random_checkpoint(tiny_dense_config(), seed=23)
        b = random_checkpoint(tiny_dense_config(vocab=29), seed=24)
        with pytest.raises(ValidationError):
            upcycle.btx_merge(a, [b], tiny_moe_config(n=4, k=2), seed=20)


class TestFineGrained:
    def test_degenerate_matches_drop_bitwise(self):
        dense = random_checkpoint(tiny_dense_config(), seed=25)
        config = tiny_moe_config(n=4, k=2)
        spec = upcycle.UpcycleSpec(method="fg-drop", ratio=0.5, seed=26)
        fg, fg_plan = upcycle.fine_grained_drop_upcycle(dense, config, spec)
        plain, plain_plan = upcycle.drop_upcycle(
            dense, config, upcycle.UpcycleSpec(method="drop", ratio=0.5, seed=26))
        for name in fg.tensors:
            assert np.array_equal(fg.tensors[name], plain.tensors[name]), name
        for layer in range(2):
            for e in range(4):
                assert np.array_equal(fg_plan.layers[layer].experts[e].dropped,
                                      plain_plan.layers[layer].experts[e].dropped)

    def test_fine_expert_widths_and_retention(self):
        d_f = 2048
        config_d = make_config(32, d_f, 1, 2, 2, 50)
        dense = random_checkpoint(config_d, seed=26)
        config = make_config(32, d_f, 1, 2, 2, 50, n=2, k=2, m=2)
        spec = upcycle.UpcycleSpec(method="fg-drop", ratio=0.5, seed=27, granularity=2)
        fg, plan = upcycle.fine_grained_drop_upcycle(dense, config, spec)
        width = d_f // 2
        assert plan.expert_width == width
        for e in range(config.routed_experts):
            gate = fg.tensors[f"layers.0.experts.{e}.gate"]
            assert gate.shape == (32, width)
            entry = plan.layers[0].experts[e]
            assert entry.dims is not None and entry.dims.size == width
            assert entry.dropped.size == math.floor(0.5 * width)
            # Retained positions are bitwise slices of the sampled parent dims.
            retained_local = entry.retained_mask(width)
            parent_gate = dense.tensors["layers.0.ffn.gate"]
            sampled = parent_gate[:, entry.dims]
            assert np.array_equal(gate[:, retained_local], sampled[:, retained_local])

    def test_pure_subsampling_with_shared_copy(self):
        config_d = make_config(16, 32, 1, 2, 2, 23)
        dense = random_checkpoint(config_d, seed=27)
        config = make_config(16, 32, 1, 2, 2, 23, n=2, k=2, m=2, k_s=1)
        spec = upcycle.UpcycleSpec(method="fg-drop", ratio=0.0, seed=28,
                                   granularity=2, shared_experts=1, shared_init="copy")
        fg, plan = upcycle.fine_grained_drop_upcycle(dense, config, spec)
        parent = {k: dense.tensors[n]
                  for k, n in zip(("gate", "up", "down"), ffn_slot_names("layers.0.ffn"))}
        for group, entries in (("experts", plan.layers[0].experts),
                               ("shared", plan.layers[0].shared)):
            for idx, entry in enumerate(entries):
                dims = entry.dims
                for kind in ("gate", "up", "down"):
                    child = fg.tensors[f"layers.0.{group}.{idx}.{kind}"]
                    want = parent[kind][:, dims] if kind != "down" else parent[kind][dims, :]
                    assert np.array_equal(child, want)

    def test_scale_factor_applies_to_up_and_down_only(self):
        config_d = make_config(16, 32, 1, 2, 2, 23)
        dense = random_checkpoint(config_d, seed=28)
        config = make_config(16, 32, 1, 2, 2, 23, n=2, k=2, m=2)
        base = upcycle.UpcycleSpec(method="fg-drop", ratio=0.0, seed=29, granularity=2)
        scaled_spec = upcycle.UpcycleSpec(method="fg-drop", ratio=0.0, seed=29,
                                          granularity=2, scale_factor=0.5)
        plain, _ = upcycle.fine_grained_drop_upcycle(dense, config, base)
        scaled, _ = upcycle.fine_grained_drop_upcycle(dense, config, scaled_spec)
        for e in range(4):
            assert np.array_equal(scaled.tensors[f"layers.0.experts.{e}.gate"],
                                  plain.tensors[f"layers.0.experts.{e}.gate"])
            assert np.allclose(scaled.tensors[f"layers.0.experts.{e}.up"],
                               0.5 * plain.tensors[f"layers.0.experts.{e}.up"].astype(np.float64),
                               rtol=1e-7, atol=0)

    def test_divisibility_violation_rejected(self):
        with pytest.raises(ValidationError, match="divisible"):
            make_config(16, 30, 1, 2, 2, 23, n=2, k=2, m=4)

    def test_too_many_shared_rejected(self):
        with pytest.raises(ValidationError, match="shared_experts"):
            make_config(16, 32, 1, 2, 2, 23, n=2, k=2, m=2, k_s=4)


@pytest.mark.parametrize("method", ["naive", "rnu", "drop", "fg-drop", "btx"])
def test_non_ffn_invariance_all_methods(method):
    dense = random_checkpoint(tiny_dense_config(), seed=90)
    if method == "btx":
        # Identical seed and branch make the non-FFN average an exact copy.
        out = upcycle.btx_merge(dense, [dense], tiny_moe_config(n=4, k=2), seed=91)
    else:
        config = tiny_moe_config()
        spec = upcycle.UpcycleSpec(method=method, ratio=0.5, seed=91)
        if method == "naive":
            out = upcycle.naive_upcycle(dense, config, seed=91)
        elif method == "rnu":
            out = upcycle.random_noise_upcycle(dense, config, spec)
        elif method == "drop":
            out, _ = upcycle.drop_upcycle(dense, config, spec)
        else:
            out, _ = upcycle.fine_grained_drop_upcycle(dense, config, spec)
    for name in _non_ffn_names(dense):
        assert np.array_equal(dense.tensors[name], out.tensors[name]), (method, name)


def test_compatibility_checks():
    dense = random_checkpoint(tiny_dense_config(), seed=30)
    bad = tiny_moe_config(vocab=29)
    with pytest.raises(ValidationError, match="vocab_size"):
        upcycle.naive_upcycle(dense, bad, seed=0)
    moe_parent = random_checkpoint(tiny_moe_config(), seed=31)
    with pytest.raises(ValidationError, match="dense"):
        upcycle.naive_upcycle(moe_parent, tiny_moe_config(), seed=0)
