"""Model core: forward paths, loss, optimizer pieces, bank growth, checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csslab.datagen import IGNORE, build_schedule
from csslab.errors import FormatError, NumericError, RangeError, ShapeError, StateError
from csslab.model import (
    PLACEHOLDER,
    Dims,
    FutureBlock,
    Hyper,
    SegModel,
    augment_context,
    count_trainable,
    embed,
    expand_classifier,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grads,
    make_future_pool,
    params,
    pixel_matrix,
    poly_lr,
    preallocate_future,
    promote_future,
    save_checkpoint,
    sgd_step,
    stacked_rows,
    trainable_components,
)

from helpers import add_block, grid_of, identity_model


# ---------------------------------------------------------------------------
# dims, hyper, init


def test_dims_validation():
    with pytest.raises(ShapeError):
        Dims(feat_dim=0)
    with pytest.raises(ShapeError):
        Dims(embed=-1)


def test_hyper_validation_and_probe_budget():
    with pytest.raises(RangeError):
        Hyper(lr0=-0.1)
    with pytest.raises(RangeError):
        Hyper(epochs_per_step=0)
    with pytest.raises(RangeError):
        Hyper(poly_on="step")
    assert Hyper().probe_budget == 80
    assert Hyper(epochs_per_step=10).probe_budget == 20
    assert Hyper(probe_epochs=7).probe_budget == 7


def test_init_model():
    rng = np.random.default_rng(5)
    m = init_model(Dims(4, 8, 3), "dft", rng)
    assert m.backbone.W1.shape == (8, 4)
    assert m.backbone.W2.shape == (3, 8)
    assert not m.backbone.b1.any() and not m.backbone.b2.any()
    assert m.blocks == [] and m.future is None and m.current_step == 0
    again = init_model(Dims(4, 8, 3), "dft", np.random.default_rng(5))
    assert again.backbone.W1.tobytes() == m.backbone.W1.tobytes()
    with pytest.raises(StateError, match="unknown strategy"):
        init_model(Dims(), "ewc", rng)


def test_context_mean_doubles_input():
    rng = np.random.default_rng(0)
    m = init_model(Dims(4, 8, 3), "dft", rng, context_mean=True)
    assert m.input_dim == 8
    assert m.backbone.W1.shape == (8, 8)
    X = pixel_matrix(m, np.random.default_rng(1).normal(size=(5, 6, 4)).astype(np.float32))
    assert X.shape == (30, 8)


# ---------------------------------------------------------------------------
# forward


def test_embed_single_unit_network():
    dims = Dims(1, 1, 1)
    m = init_model(dims, "dft", np.random.default_rng(0))
    m.backbone.W1[:] = 2.0
    m.backbone.W2[:] = 3.0
    m.backbone.b2[:] = 1.0
    z = embed(m, np.array([[[0.5]]], dtype=np.float32))
    assert z.shape == (1, 1, 1)
    assert float(z[0, 0, 0]) == 4.0
    # negative pre-activation is clamped, leaving only the output bias
    z = embed(m, np.array([[[-0.5]]], dtype=np.float32))
    assert float(z[0, 0, 0]) == 1.0


def test_identity_backbone_is_exact():
    m = identity_model()
    feats = np.random.default_rng(2).normal(size=(3, 5, 2)).astype(np.float32)
    assert np.array_equal(embed(m, feats), feats.astype(np.float64))


def test_forward_includes_future_rows():
    m = identity_model()
    add_block(m, 1, (0, 1), np.eye(2))
    m.future = FutureBlock(class_ids=(2,), W=np.full((1, 2), 9.0), b=np.zeros(1))
    logits = forward(m, grid_of(np.ones((2, 2, 2)), np.zeros((2, 2))))
    assert logits.shape == (2, 2, 3)
    CW, cb, ids = stacked_rows(m)
    assert ids == (0, 1, 2)
    CW2, _, ids2 = stacked_rows(m, include_future=False)
    assert ids2 == (0, 1) and CW2.shape == (2, 2)


def test_stacked_rows_empty_bank():
    with pytest.raises(StateError, match="no classifier rows"):
        stacked_rows(identity_model())


def test_pixel_matrix_validation():
    m = identity_model()
    with pytest.raises(ShapeError):
        pixel_matrix(m, np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        pixel_matrix(m, np.zeros((4, 4, 3), dtype=np.float32))


def test_augment_context_means():
    row = np.array([[[1.0], [2.0], [3.0]]])
    out = augment_context(row)
    assert out.shape == (1, 3, 2)
    assert out[0, :, 1].tolist() == [1.5, 2.0, 2.5]
    square = np.arange(1.0, 5.0).reshape(2, 2, 1)
    assert augment_context(square)[..., 1].tolist() == [[2.5, 2.5], [2.5, 2.5]]


# ---------------------------------------------------------------------------
# loss


def test_loss_uniform_two_classes():
    m = identity_model()
    add_block(m, 1, (0, 1), np.zeros((2, 2)))
    grid = grid_of(np.ones((2, 2, 2)), np.zeros((2, 2)))
    loss, grads = loss_and_grads(m, [grid], {"backbone", "block1"})
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)
    assert set(grads) == {"backbone.W1", "backbone.b1", "backbone.W2", "backbone.b2", "block1.W", "block1.b"}


def test_loss_saturates_when_separated():
    m = identity_model()
    add_block(m, 1, (0, 1), np.array([[100.0, 0.0], [-100.0, 0.0]]))
    grid = grid_of(np.broadcast_to(np.array([1.0, 0.0], dtype=np.float32), (2, 2, 2)), np.zeros((2, 2)))
    loss, _ = loss_and_grads(m, [grid], {"block1"})
    assert 0.0 <= loss < 1e-6


def test_loss_shift_invariance():
    rng = np.random.default_rng(4)
    m = identity_model()
    add_block(m, 1, (0, 1), rng.normal(size=(2, 2)), rng.normal(size=2))
    add_block(m, 2, (2,), rng.normal(size=(1, 2)), rng.normal(size=1))
    grid = grid_of(rng.normal(size=(3, 3, 2)), rng.integers(0, 3, size=(3, 3)))
    mask = {"backbone", "block1", "block2"}
    base, _ = loss_and_grads(m, [grid], mask)
    pred_base = forward(m, grid).argmax(axis=2)
    for blk in m.blocks:
        blk.b += 3.7
    shifted, _ = loss_and_grads(m, [grid], mask)
    assert abs(shifted - base) <= 1e-9
    assert np.array_equal(forward(m, grid).argmax(axis=2), pred_base)


def test_loss_masks_ignore_and_rejects_empty():
    m = identity_model()
    add_block(m, 1, (0, 1), np.eye(2))
    labels = np.array([[0, IGNORE], [IGNORE, IGNORE]])
    full = grid_of(np.ones((2, 2, 2)), np.zeros((2, 2)))
    part = grid_of(np.ones((2, 2, 2)), labels)
    loss_part, _ = loss_and_grads(m, [part], {"block1"})
    only = grid_of(np.ones((1, 1, 2)), np.zeros((1, 1)))
    loss_only, _ = loss_and_grads(m, [only], {"block1"})
    assert loss_part == pytest.approx(loss_only, abs=1e-15)
    with pytest.raises(RangeError, match="no non-IGNORE"):
        loss_and_grads(m, [grid_of(np.ones((2, 2, 2)), np.full((2, 2), IGNORE))], {"block1"})


def test_loss_rejects_out_of_range_label():
    m = identity_model()
    add_block(m, 1, (0, 1), np.eye(2))
    with pytest.raises(RangeError, match="outside the 2 active rows"):
        loss_and_grads(m, [grid_of(np.ones((1, 1, 2)), np.full((1, 1), 5))], {"block1"})


def test_loss_names_non_finite_block():
    m = identity_model()
    add_block(m, 1, (0, 1), np.eye(2))
    m.blocks[0].W[0, 0] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="block1"):
        loss_and_grads(m, [grid_of(np.ones((1, 1, 2)), np.zeros((1, 1)))], {"block1"})


def test_masked_gradients_are_zero():
    rng = np.random.default_rng(7)
    m = identity_model()
    add_block(m, 1, (0, 1), rng.normal(size=(2, 2)))
    grid = grid_of(rng.normal(size=(2, 2, 2)), rng.integers(0, 2, size=(2, 2)))
    _, grads = loss_and_grads(m, [grid], {"block1"})
    assert not grads["backbone.W1"].any() and not grads["backbone.b2"].any()
    assert grads["block1.W"].any()


# ---------------------------------------------------------------------------
# optimizer


def test_poly_lr_worked_value():
    assert poly_lr(0.01, 50, 100, 0.9) == pytest.approx(0.01 * 0.5**0.9, rel=1e-12)
    assert poly_lr(0.01, 50, 100, 0.9) == pytest.approx(0.0053589, abs=5e-8)
    assert poly_lr(0.01, 0, 100, 0.9) == 0.01
    assert poly_lr(0.01, 100, 100, 0.9) == 0.0


@pytest.mark.parametrize(
    "args",
    [(0.01, 0, 0, 0.9), (0.01, 5, 4, 0.9), (0.01, -1, 4, 0.9), (-0.01, 0, 4, 0.9), (0.01, 0, 4, 0.0)],
)
def test_poly_lr_rejects(args):
    with pytest.raises(RangeError):
        poly_lr(*args)


def test_sgd_momentum_worked_values():
    p = {"a.w": np.array([1.0])}
    g = {"a.w": np.array([0.5])}
    v = {"a.w": np.zeros(1)}
    sgd_step(p, g, v, lr=0.1, momentum=0.9, weight_decay=0.0, trainable_mask={"a"})
    assert p["a.w"][0] == pytest.approx(0.95, abs=1e-15)
    sgd_step(p, g, v, lr=0.1, momentum=0.9, weight_decay=0.0, trainable_mask={"a"})
    assert p["a.w"][0] == pytest.approx(0.855, abs=1e-12)
    assert v["a.w"][0] == pytest.approx(0.95, abs=1e-12)


def test_sgd_leaves_masked_components_untouched():
    p = {"a.w": np.array([1.0]), "b.w": np.array([2.0])}
    g = {"a.w": np.array([0.5]), "b.w": np.array([0.5])}
    v = {"a.w": np.zeros(1), "b.w": np.zeros(1)}
    before = p["b.w"].tobytes()
    sgd_step(p, g, v, 0.1, 0.9, 1e-4, {"a"})
    assert p["b.w"].tobytes() == before and not v["b.w"].any()


def test_sgd_rejects_non_finite_gradient():
    p = {"a.w": np.array([1.0])}
    g = {"a.w": np.array([np.nan])}
    v = {"a.w": np.zeros(1)}
    with pytest.raises(NumericError, match="a"):
        sgd_step(p, g, v, 0.1, 0.9, 0.0, {"a"})


@given(
    w=st.lists(st.floats(-10, 10), min_size=1, max_size=6),
    g=st.floats(-5, 5),
    lr=st.floats(1e-4, 1.0),
)
def test_sgd_without_momentum_is_plain_descent(w, g, lr):
    arr = np.array(w)
    p = {"a.w": arr.copy()}
    grads = {"a.w": np.full(arr.shape, g)}
    v = {"a.w": np.zeros_like(arr)}
    sgd_step(p, grads, v, lr, momentum=0.0, weight_decay=0.0, trainable_mask={"a"})
    assert np.allclose(p["a.w"], arr - lr * g, atol=1e-12)


# ---------------------------------------------------------------------------
# trainable accounting


def test_count_trainable_single_new_class():
    rng = np.random.default_rng(0)
    m = init_model(Dims(2, 3, 64), "fixbc", rng)
    expand_classifier(m, [0], rng)
    m.current_step = 1
    expand_classifier(m, [1], rng)
    assert count_trainable(m, {"block2"}) == 65


def test_count_trainable_full_model():
    rng = np.random.default_rng(0)
    m = init_model(Dims(16, 32, 24), "dft", rng)
    expand_classifier(m, range(11), rng)
    assert count_trainable(m, {"backbone", "block1"}) == 1611
    m.backbone.frozen = True
    assert count_trainable(m) == 11 * 25


def test_trainable_components_follow_flags():
    m = identity_model()
    add_block(m, 1, (0,), np.ones((1, 2)))
    assert trainable_components(m) == {"backbone", "block1"}
    m.backbone.frozen = True
    m.blocks[0].frozen = True
    m.future = FutureBlock(class_ids=(1,), W=np.ones((1, 2)), b=np.zeros(1))
    assert trainable_components(m) == {"future"}


# ---------------------------------------------------------------------------
# bank growth


def test_expand_classifier_appends_in_order():
    rng = np.random.default_rng(1)
    m = identity_model()
    expand_classifier(m, (0, 1), rng)
    m.current_step = 1
    expand_classifier(m, (2,), rng)
    assert m.learned_ids() == (0, 1, 2)
    assert [blk.step for blk in m.blocks] == [1, 2]
    assert m.blocks[1].W.shape == (1, 2) and not m.blocks[1].b.any()
    expand_classifier(m, (), rng)
    assert len(m.blocks) == 2
    with pytest.raises(StateError, match="already present"):
        expand_classifier(m, (2,), rng)
    gappy = identity_model()
    expand_classifier(gappy, (0, 1), rng)
    gappy.current_step = 1
    expand_classifier(gappy, (3,), rng)
    with pytest.raises(StateError, match="ascending"):
        expand_classifier(gappy, (2,), rng)


def test_preallocate_and_promote_keeps_values():
    rng = np.random.default_rng(3)
    schedule = build_schedule("1-1", 4)
    m = identity_model("fixbc_p")
    expand_classifier(m, (0, 1), rng)
    m.current_step = 1
    expand_classifier(m, (2,), rng)  # the entering step's block, as in a run
    preallocate_future(m, schedule, rng)
    assert m.future.class_ids == (3, 4)
    pool = m.future.W.copy()
    m.current_step = 2
    promote_future(m, (3,))
    assert m.learned_ids() == (0, 1, 2, 3)
    assert m.blocks[-1].W.tobytes() == pool[0:1].tobytes()
    assert m.future.class_ids == (4,)
    m.current_step = 3
    promote_future(m, (4,))
    assert m.future is None
    with pytest.raises(StateError, match="no future block"):
        promote_future(m, (5,))


def test_preallocate_guards():
    rng = np.random.default_rng(0)
    schedule = build_schedule("1-1", 3)
    m = identity_model("dft")
    with pytest.raises(StateError, match="fixbc_p"):
        preallocate_future(m, schedule, rng)
    m = identity_model("fixbc_p")
    expand_classifier(m, (0, 1), rng)
    m.current_step = 1
    preallocate_future(m, schedule, rng)  # rows for classes after step 2
    assert m.future.class_ids == (3,)
    with pytest.raises(StateError, match="already allocated"):
        preallocate_future(m, schedule, rng)
    done = identity_model("fixbc_p")
    expand_classifier(done, (0, 1), rng)
    done.current_step = 2
    with pytest.warns(UserWarning, match="nothing to pre-allocate"):
        preallocate_future(done, schedule, rng)
    assert done.future is None


def test_promote_missing_class():
    rng = np.random.default_rng(0)
    m = identity_model("fixbc_p")
    expand_classifier(m, (0, 1), rng)
    m.current_step = 1
    preallocate_future(m, build_schedule("1-1", 3), rng)
    with pytest.raises(StateError, match=r"\[9\]"):
        promote_future(m, (9,))


def test_oversize_pool_promotes_in_row_order():
    rng = np.random.default_rng(6)
    m = identity_model("fixbc_p")
    expand_classifier(m, (0, 1), rng)
    m.current_step = 1
    make_future_pool(m, 2, rng)
    assert m.future.class_ids == (PLACEHOLDER, PLACEHOLDER)
    pool = m.future.W.copy()
    promote_future(m, (2,), rng=rng, refill=1)
    assert m.blocks[-1].class_ids == (2,)
    assert m.blocks[-1].W.tobytes() == pool[0:1].tobytes()
    assert m.future.class_ids == (PLACEHOLDER, PLACEHOLDER)
    assert m.future.W[0].tobytes() == pool[1].tobytes()
    with pytest.raises(StateError, match="cannot cover"):
        promote_future(m, (3, 4, 5), rng=rng)
    with pytest.raises(StateError, match="without an rng"):
        promote_future(m, (3,), refill=1)


# ---------------------------------------------------------------------------
# checkpoints


def _trained_like_model(strategy="fixbc_p"):
    rng = np.random.default_rng(9)
    m = init_model(Dims(3, 5, 4), strategy, rng, context_mean=False)
    expand_classifier(m, (0, 1), rng)
    m.current_step = 1
    expand_classifier(m, (2,), rng)
    m.current_step = 2
    if strategy == "fixbc_p":
        preallocate_future(m, build_schedule("1-1", 4), rng)
    m.backbone.frozen = True
    m.blocks[0].frozen = True
    for arr in params(m).values():
        arr += rng.normal(size=arr.shape)
    return m


@pytest.mark.parametrize("strategy", ["dft", "fixbc_p"])
def test_checkpoint_roundtrip(tmp_path, strategy):
    m = _trained_like_model(strategy)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.strategy == m.strategy
    assert back.current_step == m.current_step
    assert back.dims == m.dims
    assert back.context_mean == m.context_mean
    assert back.backbone.frozen == m.backbone.frozen
    for name, arr in params(m).items():
        assert params(back)[name].tobytes() == arr.tobytes(), name
    for a, b in zip(m.blocks, back.blocks):
        assert (a.step, a.class_ids, a.frozen) == (b.step, b.class_ids, b.frozen)
    if m.future is None:
        assert back.future is None
    else:
        assert back.future.class_ids == m.future.class_ids


def test_checkpoint_context_mean_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    m = init_model(Dims(3, 5, 4), "dft", rng, context_mean=True)
    expand_classifier(m, (0,), rng)
    path = tmp_path / "ctx.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.context_mean and back.input_dim == 6
    assert back.backbone.W1.shape == (5, 6)


@pytest.mark.parametrize(
    "mangle,message",
    [
        (lambda b: b"JUNK" + b[4:], "bad checkpoint magic"),
        (lambda b: b[:6] + bytes([99]) + b[7:], "unsupported checkpoint version"),
        (lambda b: b[:10] + bytes([7]) + b[11:], "unknown strategy code"),
        (lambda b: b[:-5], "truncated"),
        (lambda b: b + b"\x00\x00", "trailing bytes"),
    ],
)
def test_checkpoint_malformed(tmp_path, mangle, message):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(_trained_like_model("dft"), path)
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(FormatError, match=message):
        load_checkpoint(path)
