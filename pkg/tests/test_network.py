import itertools
import math

import numpy as np
import pytest

from pruneseg import autograd as ag
from pruneseg.errors import ConfigError, LifecycleError, ShapeError
from pruneseg.network import (Branch, BranchState, EfficientBlockSpec, ModelConfig,
                              active_parameter_count, build_network, eb_forward,
                              network_from_descriptor, variant_config)

RNG = np.random.default_rng(5)

MINI = ModelConfig(3, (8, 16, 32), ((1, 1, 1), (1, 3, 3), (3, 1, 3), (3, 3, 1)), 3)


def mini_net(seed=0):
    return build_network(MINI, seed)


# ---------------------------------------------------------------------------
# efficient block


def test_squeeze_channel_count():
    spec = EfficientBlockSpec((3, 3, 3), channels=4)
    assert spec.squeeze_channels == 2  # squeeze ratio 0.5
    assert EfficientBlockSpec((1, 1, 1), channels=3).squeeze_channels == 1
    assert EfficientBlockSpec((1, 1, 1), channels=1).squeeze_channels == 1


def test_eb_runs_at_squeezed_width():
    rng = np.random.default_rng(0)
    br = Branch(EfficientBlockSpec((3, 3, 3), 4), rng, n_branches=1, dtype=np.float64)
    assert br.squeeze_w.shape == (2, 4, 1, 1, 1)
    assert br.expand_w.shape == (4, 2, 3, 3, 3)


@pytest.mark.parametrize("kernel", list(itertools.product((1, 3), repeat=3)))
def test_eb_output_shape_preserved(kernel):
    rng = np.random.default_rng(1)
    br = Branch(EfficientBlockSpec(kernel, 6), rng, 1, np.float64)
    x = ag.tensor(RNG.normal(size=(2, 6, 4, 4, 4)), dtype=np.float64)
    assert eb_forward(br, x).shape == x.shape


def test_eb_zero_expand_weights_zero_output():
    rng = np.random.default_rng(2)
    br = Branch(EfficientBlockSpec((1, 3, 3), 4), rng, 1, np.float64)
    br.expand_w.data[:] = 0.0
    x = ag.tensor(RNG.normal(size=(1, 4, 4, 4, 4)), dtype=np.float64)
    assert np.all(eb_forward(br, x).data == 0.0)


def test_eb_on_pruned_branch_raises():
    rng = np.random.default_rng(3)
    br = Branch(EfficientBlockSpec((1, 1, 1), 4), rng, 1, np.float64)
    br.state = BranchState.PRUNED
    with pytest.raises(LifecycleError):
        eb_forward(br, ag.tensor(RNG.normal(size=(1, 4, 2, 2, 2))))


def test_bad_kernel_rejected():
    with pytest.raises(ConfigError):
        EfficientBlockSpec((5, 3, 3), 4)
    with pytest.raises(ConfigError):
        ModelConfig(3, (4, 8, 16), ((2, 1, 1),), 2)


# ---------------------------------------------------------------------------
# PRM


def test_prm_zero_weights_residual_identity():
    net = mini_net()
    prm = net.prms[0]
    for br in prm.branches:
        br.weight.data[...] = 0.0
    x = ag.tensor(RNG.normal(size=(1, 8, 4, 4, 4)).astype(np.float32))
    assert np.array_equal(prm.forward(x).data, x.data)


def test_prm_all_masked_is_identity():
    net = mini_net()
    prm = net.prms[1]
    for br in prm.branches:
        br.state = BranchState.MASKED
    x = ag.tensor(RNG.normal(size=(1, 16, 4, 4, 4)).astype(np.float32))
    assert np.array_equal(prm.forward(x).data, x.data)


def test_prm_single_active_composition():
    net = mini_net()
    prm = net.prms[0]
    for br in prm.branches[1:]:
        br.state = BranchState.MASKED
    prm.branches[0].weight.data[...] = 1.0
    x = ag.tensor(RNG.normal(size=(1, 8, 4, 4, 4)).astype(np.float32))
    want = x.data + eb_forward(prm.branches[0], x).data
    assert np.array_equal(prm.forward(x).data, want)


def test_prm_channel_mismatch():
    net = mini_net()
    with pytest.raises(ShapeError):
        net.prms[0].forward(ag.tensor(RNG.normal(size=(1, 5, 4, 4, 4))))


# ---------------------------------------------------------------------------
# construction


def test_variant_s_channels_and_kernels():
    cfg = variant_config("S")
    assert cfg.depth == 5
    assert cfg.channels == (16, 32, 64, 128, 256)
    assert cfg.kernels == ((1, 1, 1), (1, 3, 3), (3, 1, 3), (3, 3, 1))


def test_variant_b_adds_three_kernels():
    cfg = variant_config("B")
    assert cfg.depth == 5
    assert cfg.channels == (16, 32, 64, 128, 256)
    assert len(cfg.kernels) == 7
    for extra in ((1, 1, 3), (1, 3, 1), (3, 1, 1)):
        assert extra in cfg.kernels


def test_variant_l_depth_six():
    cfg = variant_config("L")
    assert cfg.depth == 6
    assert cfg.channels == (16, 32, 64, 128, 256, 320)
    assert len(cfg.kernels) == 7


def test_prm_count_rule():
    net = mini_net()
    assert len(net.prms) == 2 * 3 - 1
    ids = [p.identifier for p in net.prms]
    assert ids == ["enc_1", "enc_2", "bn", "dec_1", "dec_2"]


def test_depth_below_two_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(1, (4,), ((1, 1, 1),), 2)


def test_build_determinism_bitwise():
    a = mini_net(seed=11)
    b = mini_net(seed=11)
    for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)
    c = mini_net(seed=12)
    assert any(not np.array_equal(ta.data, tc.data)
               for (_, ta), (_, tc) in zip(a.parameters(), c.parameters()))


def test_branch_weight_init_is_one_over_n():
    net = mini_net()
    for prm in net.prms:
        for br in prm.branches:
            assert br.weight.item() == pytest.approx(1.0 / 4)


# ---------------------------------------------------------------------------
# forward contract


def test_pyramid_shapes_d3():
    net = mini_net()
    x = ag.tensor(RNG.normal(size=(1, 1, 16, 16, 16)).astype(np.float32))
    out = net.forward(x)
    assert [tuple(l.shape) for l in out.logits] == [(1, 3, 16, 16, 16), (1, 3, 8, 8, 8)]
    assert all(l.shape[1] == 3 for l in out.logits)
    assert len(out.features) == 3 - 1
    assert out.encoder_code.shape == (1, 32, 4, 4, 4)


def test_indivisible_extent_reports_minimum():
    net = mini_net()
    with pytest.raises(ShapeError, match="multiples of 4"):
        net.forward(ag.tensor(RNG.normal(size=(1, 1, 10, 16, 16))))


# ---------------------------------------------------------------------------
# parameter accounting


def shape_walker_branch_count(channels: int, kernel) -> int:
    """Independent parameter count for one branch, excluding its weight w."""
    cs = max(1, math.floor(channels * 0.5))
    squeeze = cs * channels * 1 * 1 * 1 + cs  # conv weights + bias
    norm = 2 * cs  # scale + shift
    expand = channels * cs * kernel[0] * kernel[1] * kernel[2]  # no bias
    return squeeze + norm + expand


def test_branch_hand_count_230():
    assert shape_walker_branch_count(4, (3, 3, 3)) == 230
    rng = np.random.default_rng(0)
    br = Branch(EfficientBlockSpec((3, 3, 3), 4), rng, 1, np.float32)
    assert br.param_count() == 230 + 1  # +1 for the branch weight


def test_fresh_effective_equals_total():
    net = mini_net()
    counts = net.parameter_counts()
    assert counts["effective"] == counts["total"]
    assert counts["masked"] == 0


def test_masking_drops_exactly_branch_total():
    net = mini_net()
    before = net.parameter_counts()
    br = net.prms[2].branches[1]
    expect_drop = br.param_count()
    br.state = BranchState.MASKED
    after = net.parameter_counts()
    assert before["effective"] - after["effective"] == expect_drop
    assert after["masked"] == expect_drop
    assert after["total"] == before["total"]
    assert active_parameter_count(net) == after["effective"]


def test_every_branch_count_matches_walker():
    net = mini_net()
    for prm in net.prms:
        for br in prm.branches:
            want = shape_walker_branch_count(prm.channels, br.spec.kernel) + 1
            assert br.param_count() == want


# ---------------------------------------------------------------------------
# mask neutrality and descriptor


def test_mask_restore_forward_neutrality():
    net = mini_net(seed=4)
    x = ag.tensor(RNG.normal(size=(1, 1, 8, 8, 8)).astype(np.float32))
    with ag.no_grad():
        before = net.forward(x)
    prm = net.prms[3]
    prm.branches[0].state = BranchState.MASKED
    prm.branches[2].state = BranchState.MASKED
    prm.branches[0].state = BranchState.ACTIVE
    prm.branches[2].state = BranchState.ACTIVE
    with ag.no_grad():
        after = net.forward(x)
    for a, b in zip(before.logits, after.logits):
        assert np.array_equal(a.data, b.data)


def test_descriptor_roundtrip_structure():
    net = mini_net(seed=9)
    net.prms[1].branches[3].state = BranchState.MASKED
    net.prms[4].branches[0].free()
    net.prms[4].branches[0].state = BranchState.PRUNED
    desc = net.descriptor()
    rebuilt = network_from_descriptor(desc, seed=9)
    assert rebuilt.descriptor() == desc
    # pruned slots stay empty, masked slots keep parameters
    assert rebuilt.prms[4].branches[0].squeeze_w is None
    assert rebuilt.prms[1].branches[3].squeeze_w is not None


def test_descriptor_compact_resets_states_keeps_pruned_slots():
    net = mini_net(seed=9)
    net.prms[0].branches[2].free()
    net.prms[0].branches[2].state = BranchState.PRUNED
    net.prms[1].branches[0].state = BranchState.MASKED
    compact = network_from_descriptor(net.descriptor(), seed=1, compact=True)
    states = [b.state for b in compact.prms[0].branches]
    assert states == [BranchState.ACTIVE, BranchState.ACTIVE,
                      BranchState.PRUNED, BranchState.ACTIVE]
    assert compact.prms[0].branches[2].squeeze_w is None
    # masked slots come back as fresh active branches
    assert all(b.state is BranchState.ACTIVE for b in compact.prms[1].branches)
    # branch weights initialize to 1/n over the retained count
    assert compact.prms[0].branches[0].weight.item() == pytest.approx(1 / 3)
    assert compact.prms[1].branches[0].weight.item() == pytest.approx(1 / 4)
