import numpy as np
import numpy.testing as npt
import pytest

from linearskip import equivalence as eq
from linearskip import transforms as tr
from linearskip.network import NetworkSpec, build_network

import oracles


def make_net(kind, params=None, k=2, width=8, seed=0, **kw):
    spec = NetworkSpec(blocks_per_stage=k, stage_widths=(width,) * 3,
                       transform_kind=kind, transform_params=params or {},
                       input_shape=(3, 8, 8), **kw)
    return build_network(spec, seed=seed)


# ---------------------------------------------------------------------------
# orthogonal -> identity

def test_identity_net_converts_to_itself():
    net = make_net("identity", k=2)
    conv = eq.convert_orthogonal_to_identity(net)
    for stage in conv.stages:
        for blk in stage:
            npt.assert_array_equal(blk.pre_mix, np.eye(8))
            npt.assert_array_equal(blk.post_mix, np.eye(8))
            npt.assert_array_equal(blk.skip, np.eye(8))
    report = eq.verify_equivalence(net, conv, num_inputs=4, seed=1)
    assert report.max_deviation <= 1e-12


def test_single_block_random_orthogonal():
    net = make_net("orthogonal_random", k=1, seed=3,
                   share_random_per_stage=True)
    conv = eq.convert_orthogonal_to_identity(net)
    report = eq.verify_equivalence(net, conv, num_inputs=8, seed=2)
    assert report.max_deviation <= 1e-9


def test_four_block_tp_sixteen_inputs():
    net = make_net("orthogonal_tp", k=4, seed=5)
    conv = eq.convert_orthogonal_to_identity(net)
    report = eq.verify_equivalence(net, conv, num_inputs=16, seed=3)
    assert report.max_deviation <= 1e-8
    for stage in conv.stages:
        for blk in stage:
            assert blk._skip_is_identity


def test_theorem_wrap_structure():
    # block i wraps are Q^(L-i) after and Q^(i-L-1) before the branch
    net = make_net("orthogonal_tp", k=3, seed=1)
    q = net.stages[0][0].skip
    conv = eq.convert_orthogonal_to_identity(net)
    lcount = 3
    npt.assert_allclose(  # stem absorbs Q^L
        conv.stem.data,
        np.einsum("oc,cihw->oihw", oracles.matrix_power_loop(q, lcount),
                  net.stem.data), atol=1e-12)
    for i, blk in enumerate(conv.stages[0], start=1):
        npt.assert_allclose(blk.post_mix,
                            oracles.matrix_power_loop(q, lcount - i),
                            atol=1e-12)
        npt.assert_allclose(blk.pre_mix,
                            oracles.matrix_power_loop(q.T, lcount + 1 - i),
                            atol=1e-12)
        # wraps are invertible (orthogonal powers)
        npt.assert_allclose(blk.pre_mix @ blk.pre_mix.T, np.eye(8), atol=1e-9)


def test_orthogonal_converter_rejects_idempotent_skips():
    net = make_net("idempotent_mr", {"B": 2}, k=2)
    with pytest.raises(ValueError, match="not orthogonal"):
        eq.convert_orthogonal_to_identity(net)


def test_orthogonal_converter_rejects_no_skip():
    net = make_net("none", k=2)
    with pytest.raises(ValueError, match="no skip transform"):
        eq.convert_orthogonal_to_identity(net)


def test_orthogonal_converter_rejects_unshared_stage():
    net = make_net("orthogonal_random", k=2, seed=4)  # distinct per block
    with pytest.raises(ValueError, match="share"):
        eq.convert_orthogonal_to_identity(net)


# ---------------------------------------------------------------------------
# idempotent -> diagonal

def test_identity_net_diagonalizes_to_itself():
    net = make_net("identity", k=2)
    conv = eq.convert_idempotent_to_diagonal(net)
    report = eq.verify_equivalence(net, conv, num_inputs=4, seed=5)
    assert report.max_deviation <= 1e-10
    for stage in conv.stages:
        for blk in stage:
            npt.assert_allclose(np.diag(np.diag(blk.skip)), blk.skip, atol=0)
            npt.assert_allclose(np.unique(np.round(np.diag(blk.skip))),
                                [1.0])


def test_cmr_two_blocks_diagonalizes():
    net = make_net("idempotent_cmr", {"B": 2}, k=2, width=4, seed=7)
    conv = eq.convert_idempotent_to_diagonal(net)
    report = eq.verify_equivalence(net, conv, num_inputs=16, seed=6)
    assert report.max_deviation <= 1e-8


def test_diagonal_skip_has_rank_many_units():
    net = make_net("idempotent_mr", {"B": 4}, k=2, width=8, seed=9)
    p_rank = tr.rank(net.stages[0][0].skip)
    conv = eq.convert_idempotent_to_diagonal(net)
    skip = conv.stages[0][0].skip
    diag = np.diag(skip)
    npt.assert_allclose(skip, np.diag(diag), atol=1e-12)
    assert int(np.round(diag).sum()) == p_rank == 2
    assert set(np.round(diag)) <= {0.0, 1.0}


def test_idempotent_converter_rejects_orthogonal_skips():
    net = make_net("orthogonal_tp", k=2)
    with pytest.raises(ValueError, match="not idempotent"):
        eq.convert_idempotent_to_diagonal(net)


# ---------------------------------------------------------------------------
# verifier

def test_verify_net_against_itself_is_exact():
    net = make_net("orthogonal_tp", k=2, seed=11)
    report = eq.verify_equivalence(net, net, num_inputs=4, seed=0)
    assert report.max_deviation == 0.0
    assert report.passed


def test_verify_negative_control():
    net = make_net("orthogonal_tp", k=2, seed=11)
    other = make_net("orthogonal_tp", k=2, seed=12)
    report = eq.verify_equivalence(net, other, num_inputs=4, seed=0)
    assert report.max_deviation > 1e-3
    assert not report.passed


def test_verify_rejects_shape_mismatch():
    a = make_net("identity", k=1)
    spec = NetworkSpec(blocks_per_stage=1, stage_widths=(8, 8, 8),
                       transform_kind="identity", input_shape=(1, 8, 8))
    b = build_network(spec, seed=0)
    with pytest.raises(ValueError, match="input shapes differ"):
        eq.verify_equivalence(a, b)


# ---------------------------------------------------------------------------
# round-trip fidelity and gradient agreement

@pytest.mark.parametrize("kind,params,converter", [
    ("identity", {}, eq.convert_orthogonal_to_identity),
    ("identity", {}, eq.convert_idempotent_to_diagonal),
    ("orthogonal_tp", {}, eq.convert_orthogonal_to_identity),
    ("orthogonal_random", {}, eq.convert_orthogonal_to_identity),
    ("idempotent_mr", {"B": 2}, eq.convert_idempotent_to_diagonal),
    ("idempotent_cmr", {"B": 4}, eq.convert_idempotent_to_diagonal),
])
@pytest.mark.parametrize("k", [1, 2])
def test_round_trip_fidelity(kind, params, converter, k):
    net = make_net(kind, params, k=k, width=8, seed=13 + k,
                   share_random_per_stage=True)
    conv = converter(net)
    report = eq.verify_equivalence(net, conv, num_inputs=8, seed=7)
    assert report.max_deviation <= 1e-8, (kind, k)


def test_conversion_preserves_parameter_count():
    net = make_net("orthogonal_tp", k=3, seed=2)
    conv = eq.convert_orthogonal_to_identity(net)
    assert conv.parameter_count() == net.parameter_count()


def test_gradient_agreement():
    net = make_net("orthogonal_tp", k=2, seed=15)
    conv = eq.convert_orthogonal_to_identity(net)
    assert eq.input_gradient_deviation(net, conv, num_inputs=2, seed=1) <= 1e-7
    net2 = make_net("idempotent_cmr", {"B": 2}, k=2, width=4, seed=16)
    conv2 = eq.convert_idempotent_to_diagonal(net2)
    assert eq.input_gradient_deviation(net2, conv2, num_inputs=2, seed=2) <= 1e-7


# ---------------------------------------------------------------------------
# mixing interaction

def test_identity_multibranch_block_has_no_mixing():
    net = make_net("identity", k=1, branch_mode="multi", num_branches=4)
    report = eq.mixing_interaction_report(net.stages[0][0])
    assert not report.mixing
    assert report.pre_pattern is None and report.post_pattern is None


def test_converted_tp_multibranch_block_mixes():
    net = make_net("orthogonal_tp", k=2, branch_mode="multi", num_branches=4,
                   seed=3)
    conv = eq.convert_orthogonal_to_identity(net)
    report = eq.mixing_interaction_report(conv.stages[0][0])
    assert report.mixing
    assert report.pre_pattern.any() and report.post_pattern.any()


def test_converted_idempotent_multibranch_block_mixes():
    net = make_net("idempotent_mr", {"B": 4}, k=2, branch_mode="multi",
                   num_branches=4, seed=4)
    conv = eq.convert_idempotent_to_diagonal(net)
    report = eq.mixing_interaction_report(conv.stages[0][0])
    assert report.mixing


def test_branch_block_diagonal_q_does_not_mix():
    # a Q that is block-diagonal over the branch partition produces wraps
    # that stay within branches: no cross-branch exchange
    rng = np.random.default_rng(8)
    net = make_net("identity", k=2, branch_mode="multi", num_branches=4)
    for stage in net.stages:
        factors = []
        for _ in range(4):
            theta = rng.uniform(0, 2 * np.pi)
            c, s = np.cos(theta), np.sin(theta)
            factors.append(np.array([[c, -s], [s, c]]))
        q = np.zeros((8, 8))
        for b, f in enumerate(factors):
            q[2 * b:2 * b + 2, 2 * b:2 * b + 2] = f
        shared = q.copy()
        for blk in stage:
            blk.set_skip(shared)
    conv = eq.convert_orthogonal_to_identity(net)
    report = eq.mixing_interaction_report(conv.stages[0][0])
    assert not report.mixing
    check = eq.verify_equivalence(net, conv, num_inputs=8, seed=9)
    assert check.max_deviation <= 1e-8


def test_mixing_report_requires_multibranch():
    net = make_net("identity", k=1)
    with pytest.raises(ValueError, match="multi-branch"):
        eq.mixing_interaction_report(net.stages[0][0])
