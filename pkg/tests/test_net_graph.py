from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cayolo.errors import ConfigError, ShapeError
from cayolo.net_graph import (NetConfig, build_model, ca_overhead, count_kinds, describe, forward, load_weights,
                              mac_count, param_count, save_weights)

EIGHTH = Fraction(1, 8)


def conv_names(rows, prefix):
    return [r.name for r in rows if r.name.startswith(prefix) and r.kind == "conv-bn-act"]


@pytest.fixture(scope="module")
def small_improved():
    return build_model(NetConfig.improved(width_multiplier=EIGHTH), seed=7)


class TestStructure:
    def test_improved_layout(self):
        rows = describe(build_model(NetConfig.improved(), init_weights=False))
        kinds = count_kinds(rows)
        assert kinds["coordinate-attention"] == 5 and kinds["spp"] == 1 and kinds["head"] == 3
        assert len(conv_names(rows, "neck.spp_pre.")) == 5
        assert len(conv_names(rows, "neck.spp_post.")) == 5
        assert len(conv_names(rows, "neck.lateral4.")) == 3
        assert len(conv_names(rows, "neck.lateral3.")) == 3

    def test_ca_follows_each_downsample(self):
        names = [r.name for r in describe(build_model(NetConfig.improved(), init_weights=False))]
        for s in range(1, 6):
            i = names.index(f"backbone.stage{s}.down")
            assert names[i + 1] == f"backbone.stage{s}.ca"

    def test_baseline_layout(self):
        rows = describe(build_model(NetConfig.baseline(), init_weights=False))
        assert "coordinate-attention" not in count_kinds(rows)
        assert len(conv_names(rows, "neck.spp_pre.")) == 3
        assert len(conv_names(rows, "neck.lateral4.")) == 1

    def test_spp_row_quadruples(self):
        row = next(r for r in describe(build_model(NetConfig.improved(), init_weights=False)) if r.kind == "spp")
        assert row.out_shape == (4 * row.in_shapes[0][0], 13, 13)

    def test_describe_total_is_param_count(self, small_improved):
        rows = describe(small_improved)
        assert sum(r.params for r in rows) == param_count(small_improved)[0]

    def test_bad_size(self):
        with pytest.raises(ConfigError):
            NetConfig(input_size=400)


class TestParams:
    def test_yolov4_coco_reference(self):
        # the widely quoted YOLOv4 (80 classes) count, running stats excluded
        assert param_count(build_model(NetConfig.baseline(num_classes=80), init_weights=False))[0] == 64_363_101

    def test_monotone(self):
        base, ca, full = (param_count(build_model(c, init_weights=False))[0]
                          for c in (NetConfig.baseline(), NetConfig.ca_only(), NetConfig.improved()))
        assert base < ca < full
        assert ca - base == ca_overhead(NetConfig())

    def test_anchors_do_not_matter(self):
        anchors = [(w, w + 3) for w in range(5, 50, 5)]
        a = param_count(build_model(NetConfig.improved(), init_weights=False))[0]
        b = param_count(build_model(NetConfig.improved(anchors=anchors), init_weights=False))[0]
        assert a == b

    def test_running_stats_excluded(self, small_improved):
        total, per_node = param_count(small_improved)
        stored = sum(a.size for arrays in small_improved.params.values() for a in arrays.values())
        assert stored > total == sum(per_node.values())

    def test_macs_superset(self):
        base = mac_count(build_model(NetConfig.baseline(width_multiplier=EIGHTH), init_weights=False))
        full = mac_count(build_model(NetConfig.improved(width_multiplier=EIGHTH), init_weights=False))
        assert full > base


class TestForward:
    def test_head_shapes(self, small_improved):
        x = np.random.default_rng(0).uniform(0, 1, (1, 3, 416, 416))
        out = forward(small_improved, x)
        assert (out.stride8.shape, out.stride16.shape, out.stride32.shape) == \
            ((1, 24, 52, 52), (1, 24, 26, 26), (1, 24, 13, 13))
        assert all(np.all(np.isfinite(o)) for o in out)

    def test_batch_two_and_bit_reproducible(self):
        m = build_model(NetConfig.improved(width_multiplier=Fraction(1, 16), input_size=128), seed=3)
        x = np.random.default_rng(1).uniform(0, 1, (2, 3, 128, 128))
        a, b = forward(m, x), forward(m, x)
        assert all(o.shape[0] == 2 for o in a)
        assert all(p.tobytes() == q.tobytes() for p, q in zip(a, b))

    def test_seed_determinism(self):
        cfg = NetConfig.improved(width_multiplier=Fraction(1, 16))
        a, b = build_model(cfg, seed=5), build_model(cfg, seed=5)
        for name, arrays in a.params.items():
            for key, arr in arrays.items():
                assert arr.tobytes() == b.params[name][key].tobytes()
        c = build_model(cfg, seed=6)
        assert c.params["backbone.stem"]["weight"].tobytes() != a.params["backbone.stem"]["weight"].tobytes()

    def test_wrong_input(self, small_improved):
        with pytest.raises(ShapeError):
            forward(small_improved, np.zeros((1, 3, 320, 320)))


@settings(max_examples=12, deadline=None)
@given(num=st.integers(1, 16), den=st.sampled_from([4, 8, 16, 32]), size=st.sampled_from([320, 416, 608]),
       mode=st.sampled_from(["baseline", "ca", "improved"]), classes=st.integers(1, 20))
def test_describe_sound_for_any_config(num, den, size, mode, classes):
    cfg = NetConfig.from_mapping({"mode": mode, "width_multiplier": f"{num}/{den}",
                                  "input_size": str(size), "num_classes": str(classes)})
    rows = describe(build_model(cfg, init_weights=False))
    heads = [r.out_shape for r in rows if r.kind == "head"]
    assert heads == [(3 * (5 + classes), size // s, size // s) for s in (8, 16, 32)]


class TestWeightsAndConfig:
    def test_weight_round_trip(self, tmp_path):
        m = build_model(NetConfig.improved(width_multiplier=Fraction(1, 16)), seed=2)
        path = tmp_path / "w.cayk"
        manifest = save_weights(m, path)
        assert path.read_bytes()[:4] == b"CAYK" and (tmp_path / "w.cayk.json").exists()
        assert len(manifest["blocks"]) == len(m.params)
        back = load_weights(build_model(m.cfg, init_weights=False), path)
        for name, arrays in m.params.items():
            for key, arr in arrays.items():
                np.testing.assert_array_equal(back.params[name][key], arr.astype(np.float32))

    def test_weight_file_rejects_other_model(self, tmp_path):
        m = build_model(NetConfig.improved(width_multiplier=Fraction(1, 16)), seed=2)
        save_weights(m, tmp_path / "w.cayk")
        with pytest.raises(ShapeError):
            load_weights(build_model(NetConfig.baseline(width_multiplier=Fraction(1, 16)), init_weights=False),
                         tmp_path / "w.cayk")

    def test_config_text_round_trip(self, tmp_path):
        cfg = NetConfig.improved(width_multiplier=EIGHTH, num_classes=5, ca_reduction=8)
        path = tmp_path / "net.cfg"
        path.write_text(cfg.to_text())
        assert NetConfig.from_file(path) == cfg

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            NetConfig.from_mapping({"depth": "3"})
        with pytest.raises(ConfigError):
            NetConfig.from_mapping({"mode": "fancy"})
        with pytest.raises(ConfigError):
            NetConfig(spp_conv_count=4)
