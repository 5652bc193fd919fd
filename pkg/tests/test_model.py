import math
import struct

import numpy as np
import pytest

from binfreeze import tensor as T
from binfreeze.errors import ConfigError, ContractError, FormatError
from binfreeze.masking import Mask
from binfreeze.model import (ArchSpec, QuantMode, Rule, build, forward_deploy, forward_proxy, forward_train,
                             parameter_count, set_all_masks)
from binfreeze.snapshot import (checkpoint_bytes, load_checkpoint, load_snapshot, pack_signs, phase_report,
                                snapshot_binary, unpack_signs)

from blockade_oracle import sgn, unit_grads

ALL_MODES = [m.value for m in QuantMode]


def arch(family="mlp", depth=3, width=8, shape=(1, 4, 4), classes=5, bn=True):
    return ArchSpec(family, depth, width, shape, classes, bn)


def batch(n=12, shape=(1, 4, 4), seed=0):
    return np.random.default_rng(seed).normal(size=(n,) + shape).astype(np.float32)


def warm_bn(model, x, steps=3):
    for _ in range(steps):
        forward_train(model, x)


# -- construction ---------------------------------------------------------------

def mlp_count(c, h, w, width, depth, k, bn):
    aff = 2 if bn else 1
    stem = c * h * w * width + aff * width
    units = depth * (width * width + aff * width)
    return stem + units + width * k + k


def rescnn_count(c, width, depth, k, bn):
    aff, bn_only = (2, 2) if bn else (1, 0)
    first = (depth + 1) // 2 if depth > 1 else 1
    total = width * c * 9 + aff * width
    ch = width
    for b in range(depth):
        out = width if b < first else 2 * width
        total += out * ch * 9 + aff * out
        if out != ch:
            total += out * ch + bn_only * out
        ch = out
    return total + ch * k + k


@pytest.mark.parametrize("bn", [True, False])
def test_parameter_count_closed_form(bn):
    a = arch(depth=8, width=16, shape=(1, 28, 28), classes=10, bn=bn)
    assert build(a, "fp").num_parameters() == parameter_count(a) == mlp_count(1, 28, 28, 16, 8, 10, bn)
    for depth in (1, 2, 8, 16):
        a = arch("rescnn", depth=depth, width=4, shape=(3, 8, 8), classes=10, bn=bn)
        assert build(a, "fp").num_parameters() == parameter_count(a) == rescnn_count(3, 4, depth, 10, bn)


def test_mlp_policy():
    m = build(arch(depth=8, width=256, shape=(1, 28, 28), classes=10), "stompp_bnn")
    assert len(m.units) == 8
    assert "stem.w" not in m.scheduled_weight_names() and "head.w" not in m.scheduled_weight_names()
    assert build(arch(), "fp").scheduled_weight_names() == set()
    assert all(u.weight_mask is not None and u.act_mask is not None for u in m.units)


def test_rescnn_projections_are_fp_and_unscheduled():
    m = build(arch("rescnn", depth=8, width=8, shape=(3, 32, 32), classes=10), "stompp_bnn")
    assert len(m.units) == 8
    projected = [u for u in m.units if u.projection is not None]
    assert len(projected) == 1 and projected[0].stride == 2
    sched = m.scheduled_weight_names()
    assert all(not n.endswith("proj.w") for n in sched)
    assert len(sched) == 8


def test_masks_present_iff_stompp_routed():
    for mode in QuantMode:
        m = build(arch(), mode)
        for u in m.units:
            assert (u.weight_mask is not None) == (mode.weight_rule is Rule.STOMPP)
            assert (u.act_mask is not None) == (mode.act_rule is Rule.STOMPP)


def test_invalid_arch():
    with pytest.raises(ConfigError):
        arch(depth=0)
    with pytest.raises(ConfigError):
        arch(width=0)


def test_scheduled_init_median():
    m = build(arch(depth=2, width=64), "stompp_bnn", seed=3)
    for u in m.units:
        assert float(np.median(np.abs(u.weight.data))) == pytest.approx(0.5, rel=1e-5)
        assert np.abs(u.weight.data).max() < 1.0


def test_build_is_seeded():
    a, b, c = (build(arch(), "stompp_bnn", seed=s) for s in (1, 1, 2))
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.stem_weight.data, c.stem_weight.data)


# -- forward equivalences -------------------------------------------------------

def np_forward(model, x, act, binarize):
    """Independent eval-mode forward of the MLP family in float64."""
    def affine(z, bn, bias):
        if bn is not None:
            return (z - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.gamma.data + bn.beta.data
        return z + bias.data

    binary = model.mode.binary_activations
    h = x.reshape(len(x), -1).astype(np.float64) @ model.stem_weight.data.T
    h = affine(h, model.stem_bn, model.stem_bias)
    h = np.clip(h, -1, 1) if binary else np.maximum(h, 0)
    for u in model.units:
        w = sgn(u.weight.data) if binarize else u.weight.data.astype(np.float64)
        h = act(affine(h @ w.T, u.bn, u.bias))
    h = h / math.sqrt(model.arch.width)
    return h @ model.head_weight.data.T + model.head_bias.data


def test_fp_mode_matches_plain_network():
    m = build(arch(), "fp")
    x = batch()
    warm_bn(m, x)
    ref = np_forward(m, x, lambda z: np.maximum(z, 0), False)
    assert np.allclose(forward_proxy(m, x).data, ref, atol=1e-4)
    assert np.array_equal(forward_deploy(m, x).data, forward_proxy(m, x).data)


@pytest.mark.parametrize("family", ["mlp", "rescnn"])
def test_all_masks_one_equals_deploy_bitwise(family):
    m = build(arch(family), "stompp_bnn", seed=1)
    x = batch()
    warm_bn(m, x)
    set_all_masks(m, True)
    assert forward_proxy(m, x).data.tobytes() == forward_deploy(m, x).data.tobytes()


def test_all_masks_zero_is_hardtanh_network():
    m = build(arch(), "stompp_bnn", seed=2)
    x = batch()
    warm_bn(m, x)
    set_all_masks(m, False)
    ref = np_forward(m, x, lambda z: np.clip(z, -1, 1), False)
    assert np.allclose(forward_proxy(m, x).data, ref, atol=1e-4)


def test_deploy_matches_independent_binary_forward():
    m = build(arch(), "stompp_bnn", seed=4)
    x = batch()
    warm_bn(m, x)
    ref = np_forward(m, x, sgn, True)
    out = forward_deploy(m, x).data
    assert np.allclose(out, ref, atol=1e-4)


def test_deploy_trace_is_binary():
    m = build(arch(depth=3), "hybrid_aw", seed=0)
    trace = []
    forward_deploy(m, batch(), trace=trace)
    assert len(trace) == 6
    for _, _, vals in trace:
        assert set(np.unique(vals).tolist()) <= {-1.0, 1.0}


def test_forward_train_deterministic_for_fixed_masks():
    m = build(arch(), "stompp_bnn", seed=5)
    rng = np.random.default_rng(0)
    for u in m.units:
        u.weight_mask = Mask(u.weight.shape, rng.random(u.weight.shape) < 0.5)
    x = batch()
    assert forward_train(m, x).data.tobytes() == forward_train(m, x).data.tobytes()


def test_mask_drift_is_contract_error():
    m = build(arch(), "stompp_bnn")
    m.units[1].act_mask = Mask((3,))
    with pytest.raises(ContractError):
        forward_train(m, batch())


def test_random_bnn_is_at_chance():
    classes, n = 10, 2000
    correct = total = 0
    for seed in range(10):
        a = arch(depth=4, width=16, shape=(1, 6, 6), classes=classes)
        m = build(a, "stompp_bnn", seed=seed)
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(n, 1, 6, 6)).astype(np.float32)
        y = rng.integers(0, classes, size=n)
        correct += int((forward_deploy(m, x).data.argmax(axis=1) == y).sum())
        total += n
    p = 1 / classes
    assert abs(correct / total - p) <= 3 * math.sqrt(p * (1 - p) / total)


# -- hybrid gradient paths ------------------------------------------------------

def test_hybrid_wa_gradient_paths():
    a = arch(depth=2, width=5, shape=(1, 2, 2), classes=3, bn=False)
    m = build(a, "hybrid_wa", seed=1)
    rng = np.random.default_rng(2)
    for u in m.units:
        u.weight_mask = Mask(u.weight.shape, rng.random(u.weight.shape) < 0.5)
    x = rng.normal(size=(10, 1, 2, 2)).astype(np.float32)
    y = rng.integers(0, 3, size=10)
    with T.Tape():
        loss = T.softmax_cross_entropy(forward_train(m, x), y)
    T.backward(loss)
    for u, (dw, db) in zip(m.units, unit_grads(m, x, y)):
        assert np.all(u.weight.grad[u.weight_mask.bits] == 0)
        assert np.allclose(u.weight.grad, dw, atol=1e-6)
        assert np.allclose(u.bias.grad, db, atol=1e-6)
    # identity surrogate on activations: even the first unit's bias sees gradient
    assert np.any(m.units[0].bias.grad != 0)


def test_hybrid_aw_clamps_ste_weights_only():
    m = build(arch(), "hybrid_aw")
    assert m.ste_clamped() == [u.weight for u in m.units]
    assert build(arch(), "hybrid_wa").ste_clamped() == []


# -- snapshot -------------------------------------------------------------------

def test_pack_sixteen_weights_two_bytes():
    w = np.array([1, -1, 0.5, -0.2, 0, 3, -4, 2, -1, -1, -1, -1, 1, 1, 1, 1], dtype=np.float32)
    packed = pack_signs(w)
    assert packed == bytes([0b10101101, 0b00001111])
    assert np.array_equal(unpack_signs(packed, (16,)), np.where(w >= 0, 1.0, -1.0))


def finalized_model(family="mlp", mode="stompp_bnn", **kw):
    a = arch(family, **kw)
    m = build(a, mode, seed=7)
    warm_bn(m, batch(shape=a.input_shape))
    set_all_masks(m, True)
    return m


@pytest.mark.parametrize("family", ["mlp", "rescnn"])
@pytest.mark.parametrize("mode", ["stompp_bnn", "stompp_bwn", "ste_bnn", "hybrid_wa", "fp"])
def test_snapshot_round_trip_bitwise(family, mode):
    m = finalized_model(family, mode)
    buf = snapshot_binary(m)
    back = load_snapshot(buf)
    x = batch(seed=3)
    assert forward_deploy(back, x).data.tobytes() == forward_deploy(m, x).data.tobytes()
    assert snapshot_binary(back) == buf


def test_snapshot_scheduled_weights_are_pm1_and_fp_layers_real():
    back = load_snapshot(snapshot_binary(finalized_model()))
    for u in back.units:
        assert set(np.unique(u.weight.data).tolist()) <= {-1.0, 1.0}
    assert len(np.unique(back.stem_weight.data)) > 2


def test_snapshot_compression_near_32x():
    m = finalized_model(depth=4, width=256, shape=(1, 2, 2))
    buf = snapshot_binary(m)
    sched = sum(u.weight.size for u in m.units)
    fp_bytes = 4 * (m.num_parameters() - sched) + 4 * sum(b.size for _, b in m.named_buffers())
    packed_total = len(buf) - fp_bytes
    ratio = 4 * sched / packed_total
    assert 30.0 < ratio < 32.0


def test_snapshot_refuses_unfinalized():
    m = build(arch(), "stompp_bnn")
    m.units[1].weight_mask.bits[0, 0] = True
    m.units[1].weight_mask = Mask.from_bits(m.units[1].weight_mask.bits)
    with pytest.raises(ContractError, match="unit 0") as exc:
        snapshot_binary(m)
    assert "unit 1" in str(exc.value)
    assert len(phase_report(m)) == 3


def test_checkpoint_round_trip_keeps_latents_and_masks():
    m = build(arch(), "stompp_bnn", seed=9)
    rng = np.random.default_rng(1)
    for u in m.units:
        u.weight_mask = Mask(u.weight.shape, rng.random(u.weight.shape) < 0.3)
        u.act_mask = Mask(u.act_shape, rng.random(u.act_shape) < 0.6)
    warm_bn(m, batch())
    back = load_checkpoint(checkpoint_bytes(m))
    for (n1, a), (_, b) in zip(m.named_parameters(), back.named_parameters()):
        assert np.array_equal(a.data, b.data), n1
    for u, v in zip(m.units, back.units):
        assert u.weight_mask == v.weight_mask and u.act_mask == v.act_mask
    x = batch(seed=2)
    assert forward_proxy(back, x).data.tobytes() == forward_proxy(m, x).data.tobytes()


def test_snapshot_format_errors():
    buf = snapshot_binary(finalized_model())
    with pytest.raises(FormatError, match="magic"):
        load_snapshot(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        load_snapshot(buf[:4] + struct.pack("<H", 9) + buf[6:])
    with pytest.raises(FormatError, match="truncated"):
        load_snapshot(buf[:-5])
    with pytest.raises(FormatError, match="trailing"):
        load_snapshot(buf + b"\0")
    with pytest.raises(FormatError, match="kind"):
        load_checkpoint(buf)
    try:
        load_snapshot(buf[:-5])
    except FormatError as exc:
        assert exc.offset is not None
