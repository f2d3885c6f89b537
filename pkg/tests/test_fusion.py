"""Folding rules, conv lowering, and whole-network fusion."""

import numpy as np
import pytest

from relprop import (
    AvgPool,
    BatchNorm,
    BnParams,
    Conv2D,
    Dense,
    DimensionError,
    Flatten,
    MaxPool,
    Network,
    ReLU,
    UnsupportedFusionError,
    batchnorm_forward,
    conv2d_forward,
    dense_forward,
    expand_bn_per_element,
    flatten,
    forward,
    fuse_bn_conv_post,
    fuse_bn_conv_pre,
    fuse_bn_dense_post,
    fuse_bn_dense_pre,
    fuse_network,
    lower_conv_to_dense,
)

from conftest import (
    compose_dense_bn_post,
    compose_dense_bn_pre,
    random_bn,
    random_conv,
    random_dense,
    random_input,
    random_network,
)


def identity_bn(n):
    return BnParams(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n))


class TestDensePre:
    def test_identity_bn_leaves_dense_unchanged(self, rng):
        d = random_dense(rng, 3, 4)
        f = fuse_bn_dense_pre(identity_bn(4), d)
        assert np.array_equal(f.weights, d.weights)
        np.testing.assert_allclose(f.bias, d.bias, atol=1e-12)

    def test_hand_case(self):
        bn = BnParams([2.0], [1.0], [0.0], [1.0])
        d = Dense(np.array([[3.0]]), np.zeros(1))
        f = fuse_bn_dense_pre(bn, d)
        assert f.weights[0, 0] == 6.0 and f.bias[0] == 3.0
        x = np.array([1.0])
        assert compose_dense_bn_pre(bn, d, x)[0] == 9.0
        assert dense_forward(f.weights, f.bias, x)[0] == 9.0

    def test_composition_oracle(self, rng):
        bn = random_bn(rng, 4)
        d = random_dense(rng, 3, 4)
        f = fuse_bn_dense_pre(bn, d)
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(-2.0, 2.0, 4)
            dev = np.abs(
                dense_forward(f.weights, f.bias, x) - compose_dense_bn_pre(bn, d, x)
            ).max()
            worst = max(worst, dev)
        assert worst <= 1e-12

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            fuse_bn_dense_pre(identity_bn(3), random_dense(rng, 3, 4))


class TestDensePost:
    def test_identity_bn(self, rng):
        d = random_dense(rng, 2, 5)
        f = fuse_bn_dense_post(d, identity_bn(2))
        assert np.array_equal(f.weights, d.weights)
        np.testing.assert_allclose(f.bias, d.bias, atol=1e-12)

    def test_hand_case(self):
        d = Dense(np.array([[3.0]]), np.array([1.0]))
        bn = BnParams([2.0], [0.5], [1.0], [2.0])
        f = fuse_bn_dense_post(d, bn)
        assert f.weights[0, 0] == 3.0 and f.bias[0] == 0.5
        x = np.array([1.0])
        assert compose_dense_bn_post(d, bn, x)[0] == 3.5
        assert dense_forward(f.weights, f.bias, x)[0] == 3.5

    def test_composition_oracle(self, rng):
        d = random_dense(rng, 2, 5)
        bn = random_bn(rng, 2)
        f = fuse_bn_dense_post(d, bn)
        for _ in range(100):
            x = rng.uniform(-2.0, 2.0, 5)
            np.testing.assert_allclose(
                dense_forward(f.weights, f.bias, x),
                compose_dense_bn_post(d, bn, x),
                atol=1e-12,
            )


class TestConvPost:
    def test_identity_bn(self, rng):
        conv = random_conv(rng, 3, 2, padding=1)
        f = fuse_bn_conv_post(conv, identity_bn(3))
        assert np.array_equal(f.kernel, conv.kernel)
        np.testing.assert_allclose(f.bias, conv.bias, atol=1e-12)

    def test_hand_case(self):
        conv = Conv2D(np.array([[[[2.0]]]]), np.array([1.0]))
        bn = BnParams([3.0], [0.0], [1.0], [3.0])
        f = fuse_bn_conv_post(conv, bn)
        assert f.kernel[0, 0, 0, 0] == 2.0 and f.bias[0] == 0.0
        x = np.array([[[1.0]]])
        composed = batchnorm_forward(bn, conv2d_forward(conv.kernel, conv.bias, x))
        assert composed[0, 0, 0] == 2.0
        assert conv2d_forward(f.kernel, f.bias, x)[0, 0, 0] == 2.0

    def test_composition_oracle_with_padding(self, rng):
        conv = random_conv(rng, 3, 3, padding=1)
        bn = random_bn(rng, 3)
        f = fuse_bn_conv_post(conv, bn)
        worst = 0.0
        for _ in range(50):
            x = rng.uniform(-1.0, 1.0, (3, 6, 6))
            composed = batchnorm_forward(
                bn, conv2d_forward(conv.kernel, conv.bias, x, 1, 1)
            )
            fused = conv2d_forward(f.kernel, f.bias, x, 1, 1)
            worst = max(worst, np.abs(fused - composed).max())
        assert worst <= 1e-10


class TestConvPre:
    def test_identity_bn(self, rng):
        conv = random_conv(rng, 3, 2)
        f = fuse_bn_conv_pre(identity_bn(2), conv)
        assert np.array_equal(f.kernel, conv.kernel)
        np.testing.assert_allclose(f.bias, conv.bias, atol=1e-12)

    def test_hand_case(self):
        conv = Conv2D(np.array([[[[3.0]]]]), np.zeros(1))
        bn = BnParams([2.0], [1.0], [0.0], [1.0])
        f = fuse_bn_conv_pre(bn, conv)
        assert f.kernel[0, 0, 0, 0] == 6.0 and f.bias[0] == 3.0
        x = np.array([[[1.0]]])
        composed = conv2d_forward(conv.kernel, conv.bias, batchnorm_forward(bn, x))
        assert composed[0, 0, 0] == 9.0
        assert conv2d_forward(f.kernel, f.bias, x)[0, 0, 0] == 9.0

    def test_composition_oracle_padding_zero(self, rng):
        conv = random_conv(rng, 2, 2, k=3, padding=0)
        bn = random_bn(rng, 2)
        f = fuse_bn_conv_pre(bn, conv)
        worst = 0.0
        for _ in range(50):
            x = rng.uniform(-1.0, 1.0, (2, 6, 6))
            composed = conv2d_forward(
                conv.kernel, conv.bias, batchnorm_forward(bn, x), 1, 0
            )
            fused = conv2d_forward(f.kernel, f.bias, x, 1, 0)
            worst = max(worst, np.abs(fused - composed).max())
        assert worst <= 1e-10

    def test_padding_rejected(self, rng):
        conv = random_conv(rng, 2, 2, padding=1)
        with pytest.raises(UnsupportedFusionError, match="lower"):
            fuse_bn_conv_pre(identity_bn(2), conv)


class TestLowering:
    def test_1x1_kernel_is_scaled_identity(self):
        conv = Conv2D(np.array([[[[2.5]]]]), np.zeros(1))
        lowered = lower_conv_to_dense(conv, (1, 3, 3))
        assert np.array_equal(lowered.weights, 2.5 * np.eye(9))
        assert np.array_equal(lowered.bias, np.zeros(9))

    def test_2x2_kernel_3x3_input_tap_pattern(self):
        a1, a2, a3, a4 = 1.0, 2.0, 3.0, 4.0
        conv = Conv2D(np.array([[[[a1, a2], [a3, a4]]]]), np.zeros(1))
        lowered = lower_conv_to_dense(conv, (1, 3, 3))
        expected = np.array(
            [
                [a1, a2, 0, a3, a4, 0, 0, 0, 0],
                [0, a1, a2, 0, a3, a4, 0, 0, 0],
                [0, 0, 0, a1, a2, 0, a3, a4, 0],
                [0, 0, 0, 0, a1, a2, 0, a3, a4],
            ]
        )
        assert np.array_equal(lowered.weights, expected)

    def test_forward_equality_with_padding(self, rng):
        conv = random_conv(rng, 3, 2, k=3, padding=1)
        lowered = lower_conv_to_dense(conv, (2, 5, 5))
        for _ in range(25):
            x = rng.uniform(-1.0, 1.0, (2, 5, 5))
            direct = flatten(conv2d_forward(conv.kernel, conv.bias, x, 1, 1))
            via = dense_forward(lowered.weights, lowered.bias, flatten(x))
            np.testing.assert_allclose(via, direct, atol=1e-9)

    def test_bias_replicated_per_position(self, rng):
        conv = random_conv(rng, 2, 1, k=2)
        lowered = lower_conv_to_dense(conv, (1, 4, 4))
        assert np.array_equal(lowered.bias, np.repeat(conv.bias, 9))

    def test_geometry_error(self, rng):
        conv = Conv2D(np.ones((1, 1, 2, 2)), np.zeros(1), stride=2)
        with pytest.raises(Exception):
            lower_conv_to_dense(conv, (1, 5, 5))


class TestExpandPerElement:
    def test_per_channel_repeats(self):
        bn = BnParams([1.0, 2.0], [0.1, 0.2], [0.0, 0.0], [1.0, 1.0])
        out = expand_bn_per_element(bn, (2, 2, 2))
        assert np.array_equal(out.gamma, [1, 1, 1, 1, 2, 2, 2, 2])

    def test_matches_batchnorm_forward(self, rng):
        bn = random_bn(rng, 3)
        x = rng.normal(size=(3, 4, 4))
        expanded = expand_bn_per_element(bn, x.shape)
        np.testing.assert_allclose(
            batchnorm_forward(expanded, flatten(x)),
            flatten(batchnorm_forward(bn, x)),
            atol=1e-15,
        )


def conv_net_with_bn(rng, placement, padding=0, h=8):
    """Small conv network with a BN on each conv, tagged with ``placement``."""
    c1, c2 = 3, 4
    layers = []
    if placement == "after_activation":
        layers += [
            BatchNorm(random_bn(rng, 1), placement=placement),
            random_conv(rng, c1, 1, k=3, padding=padding),
            ReLU(),
            BatchNorm(random_bn(rng, c1), placement=placement),
            random_conv(rng, c2, c1, k=3, padding=padding),
            ReLU(),
        ]
    else:
        layers += [
            random_conv(rng, c1, 1, k=3, padding=padding),
            BatchNorm(random_bn(rng, c1), placement=placement),
            ReLU(),
            random_conv(rng, c2, c1, k=3, padding=padding),
            BatchNorm(random_bn(rng, c2), placement=placement),
            ReLU(),
        ]
    out = h if padding else h - 4
    layers.append(Flatten())
    width = c2 * out * out
    layers.append(random_dense(rng, 2, width))
    return Network(layers, (1, h, h), -1.0, 1.0, 2)


class TestFuseNetwork:
    def test_bn_free_network_unchanged(self, rng):
        net = random_network(rng)
        fused, report = fuse_network(net, "fuse")
        assert not report.records and not report.unfused
        x = random_input(rng, net)
        assert np.array_equal(forward(net, x).logits, forward(fused, x).logits)

    def test_alternating_bn_dense_fuses_pure_dense(self, rng):
        from test_model_io import fc2_like_network

        net = fc2_like_network(rng)
        fused, report = fuse_network(net, "fuse")
        assert not fused.bn_indices()
        assert [rec.rule for rec in report.records] == ["dense_pre", "dense_pre"]
        for _ in range(20):
            x = random_input(rng, net)
            np.testing.assert_allclose(
                forward(fused, x).logits, forward(net, x).logits, atol=1e-10
            )

    def test_conv_post_records_for_bn_after_conv(self, rng):
        net = conv_net_with_bn(rng, "before_activation", padding=1)
        fused, report = fuse_network(net, "fuse")
        assert not fused.bn_indices() and not report.unfused
        assert all(rec.rule == "conv_post" for rec in report.records)
        for _ in range(20):
            x = random_input(rng, net)
            np.testing.assert_allclose(
                forward(fused, x).logits, forward(net, x).logits, atol=1e-8
            )

    def test_conv_pre_records_for_bn_before_conv(self, rng):
        net = conv_net_with_bn(rng, "after_activation", padding=0)
        fused, report = fuse_network(net, "fuse")
        assert not fused.bn_indices() and not report.unfused
        assert all(rec.rule == "conv_pre" for rec in report.records)
        for _ in range(20):
            x = random_input(rng, net)
            np.testing.assert_allclose(
                forward(fused, x).logits, forward(net, x).logits, atol=1e-8
            )

    def test_bn_before_padded_conv_is_residue_under_fuse(self, rng):
        net = conv_net_with_bn(rng, "after_activation", padding=1)
        fused, report = fuse_network(net, "fuse")
        assert len(report.unfused) == 2
        assert all("lower_then_fuse" in e["reason"] for e in report.unfused)
        assert len(fused.bn_indices()) == 2

    def test_lower_then_fuse_handles_padded_conv_exactly(self, rng):
        net = conv_net_with_bn(rng, "after_activation", padding=1, h=6)
        fused, report = fuse_network(net, "lower_then_fuse")
        assert not fused.bn_indices() and not report.unfused
        assert all(rec.rule == "lowered" for rec in report.records)
        worst = 0.0
        for _ in range(20):
            x = random_input(rng, net)
            dev = np.abs(forward(fused, x).logits - forward(net, x).logits).max()
            worst = max(worst, dev)
        assert worst <= 1e-9  # includes border pixels touched by padding

    def test_lower_then_fuse_per_element_params(self, rng):
        # spatially varying normalization: the stand-in for normalizations
        # whose parameters differ per element rather than per channel
        h = 6
        bn = random_bn(rng, 2 * h * h)
        conv = random_conv(rng, 3, 2, k=3, padding=1)
        layers = [
            BatchNorm(bn, placement="after_activation"),
            conv,
            ReLU(),
            Flatten(),
            random_dense(rng, 2, 3 * h * h),
        ]
        net = Network(layers, (2, h, h), -1.0, 1.0, 2)
        bypassed, report = fuse_network(net, "fuse")
        assert report.unfused
        fused, report = fuse_network(net, "lower_then_fuse")
        assert not fused.bn_indices() and not report.unfused
        for _ in range(20):
            x = random_input(rng, net)
            np.testing.assert_allclose(
                forward(fused, x).logits, forward(net, x).logits, atol=1e-9
            )

    def test_bypass_marks_without_removing(self, rng):
        net = conv_net_with_bn(rng, "before_activation", padding=1)
        prepared, report = fuse_network(net, "bypass")
        assert len(prepared.bn_indices()) == 2
        assert all(prepared.layers[i].bypass for i in prepared.bn_indices())
        assert not report.records and len(report.unfused) == 2
        x = random_input(rng, net)
        assert np.array_equal(forward(prepared, x).logits, forward(net, x).logits)

    def test_bn_next_to_pooling_is_residue(self, rng):
        layers = [
            random_conv(rng, 2, 1, k=3, padding=1),
            ReLU(),
            BatchNorm(random_bn(rng, 2), placement="after_activation"),
            MaxPool((2, 2), 2),
            Flatten(),
            random_dense(rng, 2, 2 * 4 * 4),
        ]
        net = Network(layers, (1, 8, 8), -1.0, 1.0, 2)
        fused, report = fuse_network(net, "lower_then_fuse")
        assert len(report.unfused) == 1
        assert len(fused.bn_indices()) == 1

    def test_untagged_bn_folds_into_following_layer(self, rng):
        # legacy files without a placement tag: fold forward
        layers = [
            BatchNorm(random_bn(rng, 4)),
            random_dense(rng, 2, 4),
        ]
        net = Network(layers, (4,), -1.0, 1.0, 2)
        fused, report = fuse_network(net, "fuse")
        assert not fused.bn_indices()
        assert report.records[0].rule == "dense_pre"

    def test_chained_bn_layers_fuse_through(self, rng):
        layers = [
            BatchNorm(random_bn(rng, 4), placement="after_activation"),
            BatchNorm(random_bn(rng, 4), placement="after_activation"),
            random_dense(rng, 2, 4),
        ]
        net = Network(layers, (4,), -1.0, 1.0, 2)
        fused, report = fuse_network(net, "fuse")
        assert not fused.bn_indices() and len(report.records) == 2
        for _ in range(10):
            x = random_input(rng, net)
            np.testing.assert_allclose(
                forward(fused, x).logits, forward(net, x).logits, atol=1e-10
            )

    def test_report_accounts_for_every_bn_exactly_once(self, rng):
        for policy in ("fuse", "lower_then_fuse", "bypass"):
            for maker in (
                lambda: conv_net_with_bn(rng, "after_activation", padding=1, h=6),
                lambda: conv_net_with_bn(rng, "before_activation", padding=1, h=6),
            ):
                net = maker()
                _, report = fuse_network(net, policy)
                accounted = sorted(
                    [rec.layer_indices[0] for rec in report.records]
                    + [e["layer_index"] for e in report.unfused]
                )
                assert accounted == net.bn_indices()

    def test_preserves_class_count_and_bounds(self, rng):
        net = conv_net_with_bn(rng, "before_activation", padding=1)
        fused, _ = fuse_network(net, "fuse")
        assert fused.class_count == net.class_count
        assert (fused.input_low, fused.input_high) == (net.input_low, net.input_high)


class TestFusionProperties:
    def test_exactness_sweep(self, rng):
        """Random parameter sweep across all four closed-form rules."""
        worst = 0.0
        for _ in range(25):
            n_in, n_out = rng.integers(2, 6), rng.integers(2, 6)
            d = random_dense(rng, n_out, n_in)
            bn_in, bn_out = random_bn(rng, n_in), random_bn(rng, n_out)
            f1 = fuse_bn_dense_pre(bn_in, d)
            f2 = fuse_bn_dense_post(d, bn_out)
            for _ in range(10):
                x = rng.uniform(-1.0, 1.0, n_in)
                worst = max(
                    worst,
                    np.abs(
                        dense_forward(f1.weights, f1.bias, x)
                        - compose_dense_bn_pre(bn_in, d, x)
                    ).max(),
                    np.abs(
                        dense_forward(f2.weights, f2.bias, x)
                        - compose_dense_bn_post(d, bn_out, x)
                    ).max(),
                )
        assert worst <= 1e-10

    def test_identity_fusion_weights_bitwise(self, rng):
        # gamma == std exactly: the scale is exactly 1.0, weights unchanged
        for _ in range(10):
            std = rng.uniform(0.1, 10.0, 4)
            mean = rng.normal(size=4)
            bn = BnParams(std.copy(), mean.copy(), mean, std)
            d = random_dense(rng, 3, 4)
            f = fuse_bn_dense_pre(bn, d)
            assert np.array_equal(f.weights, d.weights)
            assert np.abs(f.bias - d.bias).max() <= 1e-12 * max(1.0, np.abs(d.bias).max() + 4)
