import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xflow import autodiff as ad
from xflow import xconn as X
from xflow.errors import ContractError

TABLE_CONNECTIONS = [
    # (target [C, H, W], kernel, dense size) from the two architecture tables
    ((16, 40, 30), (8, 8), 759),
    ((32, 20, 15), (4, 4), 204),
    ((8, 40, 30), (16, 16), 375),
    ((16, 20, 15), (8, 8), 104),
]


@pytest.mark.parametrize("target,kernel,dense", TABLE_CONNECTIONS)
def test_dense_size_formula_reproduces_tables(target, kernel, dense):
    h, w = X.reshape_size(target[1:], kernel)
    assert h * w == dense


def test_xconn_2d_to_1d_first_table_connection(rng):
    conn = X.XConn2Dto1D((16, 40, 30), 16, 64, rng)
    assert conn.conv.K.shape == (16, 16, 1, 1)
    assert conn.fc.W.shape == (64, 19200)
    assert X.apply_xconn_2d_to_1d(rng.normal(size=(16, 40, 30)), conn).shape == (64,)


def test_xconn_2d_to_1d_second_table_connection(rng):
    conn = X.XConn2Dto1D((32, 20, 15), 32, 128, rng)
    assert X.apply_xconn_2d_to_1d(rng.normal(size=(32, 20, 15)), conn).shape == (128,)


def test_xconn_1d_to_2d_table_connections(rng):
    conn = X.XConn1Dto2D(128, (16, 40, 30), (8, 8), rng)
    assert conn.fc.n_out == 759 and conn.map_shape == (1, 33, 23)
    assert X.apply_xconn_1d_to_2d(rng.normal(size=128), conn).shape == (16, 40, 30)
    conn = X.XConn1Dto2D(32, (8, 40, 30), (16, 16), rng)
    assert conn.fc.n_out == 375 and conn.map_shape == (1, 25, 15)
    assert X.apply_xconn_1d_to_2d(rng.normal(size=32), conn).shape == (8, 40, 30)


def _zero(conn):
    for p in conn.parameters():
        p.value[:] = 0.0


def test_zero_input_zero_biases_give_zero_output(rng):
    conn = X.XConn2Dto1D((4, 6, 4), 3, 5, rng)
    assert np.all(X.apply_xconn_2d_to_1d(np.zeros((4, 6, 4)), conn) == 0.0)
    conn = X.XConn1Dto2D(7, (2, 6, 4), (3, 2), rng)
    assert np.all(X.apply_xconn_1d_to_2d(np.zeros(7), conn) == 0.0)


def test_residual_pipelines_match_merge_targets(rng):
    res = X.ResConn1Dto2D(26 * 11, (16, 40, 30), (8, 8), rng)
    assert X.apply_residual(rng.normal(size=286), res).shape == (16, 40, 30)
    res = X.ResConn2Dto1D((11, 80, 60), 16, 128, rng)
    assert X.apply_residual(rng.normal(size=(11, 80, 60)), res).shape == (128,)
    assert res.kind == "residual" and X.XConn2Dto1D.kind == "cross"


def test_zeroed_residual_contributes_nothing(rng):
    res = X.ResConn1Dto2D(5, (3, 4, 4), (2, 2), rng)
    _zero(res)
    target = ad.constant(rng.normal(size=(2, 3, 4, 4)))
    out = X.merge(target, [res(ad.constant(rng.normal(size=(2, 5))))])
    np.testing.assert_array_equal(out.value, target.value)


def test_shape_mismatch_rejected(rng):
    conn = X.XConn2Dto1D((4, 6, 4), 3, 5, rng)
    with pytest.raises(ContractError):
        X.apply_xconn_2d_to_1d(np.zeros((4, 6, 6)), conn)
    conn = X.XConn1Dto2D(7, (2, 6, 4), (3, 2), rng)
    with pytest.raises(ContractError):
        X.apply_xconn_1d_to_2d(np.zeros(8), conn)
    with pytest.raises(ContractError):
        X.XConn1Dto2D(7, (2, 6, 4), (7, 2), rng)


def test_merge_table_depth_one(rng):
    cnn = ad.constant(rng.normal(size=(1, 16, 40, 30)))
    res = ad.constant(rng.normal(size=(1, 16, 40, 30)))
    x = ad.constant(rng.normal(size=(1, 16, 40, 30)))
    out = X.merge(cnn, [res], [x], axis=1)
    assert out.shape == (1, 32, 40, 30)
    np.testing.assert_array_equal(out.value[:, :16], cnn.value + res.value)
    np.testing.assert_array_equal(out.value[:, 16:], x.value)
    mlp = X.merge(ad.constant(np.ones((1, 128))), [ad.constant(np.ones((1, 128)))], [ad.constant(np.zeros((1, 64)))])
    assert mlp.shape == (1, 192)


def test_merge_identity_and_errors(rng):
    t = ad.constant(rng.normal(size=(2, 5)))
    assert X.merge(t) is t
    with pytest.raises(ContractError):
        X.merge(t, [ad.constant(np.zeros((2, 4)))])
    with pytest.raises(ContractError):
        X.merge(ad.constant(np.zeros((1, 2, 3, 3))), [], [ad.constant(np.zeros((1, 2, 4, 3)))])


def test_merge_point_active():
    assert not X.MergePoint(1).active
    assert X.MergePoint(1, residuals=["r"]).active


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), data=st.data())
def test_dense_size_formula_lands_on_target(h, w, data):
    kh = data.draw(st.integers(1, h))
    kw = data.draw(st.integers(1, w))
    conn = X.XConn1Dto2D(3, (2, h, w), (kh, kw), np.random.default_rng(0))
    assert X.apply_xconn_1d_to_2d(np.ones(3), conn).shape == (2, h, w)


@settings(max_examples=20, deadline=None)
@given(n_res=st.integers(0, 3), sizes=st.lists(st.integers(1, 4), max_size=3))
def test_merge_shape_laws(n_res, sizes):
    r = np.random.default_rng(n_res)
    target = ad.constant(r.normal(size=(2, 3, 4, 4)))
    out = X.merge(target, [ad.constant(r.normal(size=(2, 3, 4, 4))) for _ in range(n_res)],
                  [ad.constant(r.normal(size=(2, s, 4, 4))) for s in sizes])
    assert out.shape == (2, 3 + sum(sizes), 4, 4)


@pytest.mark.parametrize("cls,args,in_shape", [
    (X.XConn2Dto1D, ((3, 4, 4), 2, 5), (2, 3, 4, 4)),
    (X.XConn1Dto2D, (6, (2, 5, 4), (3, 2)), (2, 6)),
    (X.ResConn2Dto1D, ((2, 4, 6), 3, 4), (2, 2, 4, 6)),
    (X.ResConn1Dto2D, (4, (3, 4, 4), (2, 3)), (2, 4)),
])
def test_connection_grad_check(rng, cls, args, in_shape):
    conn = cls(*args, rng)
    x = ad.Parameter(rng.normal(size=in_shape), "x")
    r = rng.normal(size=conn(x).shape)
    assert ad.grad_check(lambda: ad.sum(ad.mul(conn(x), r)), [x] + conn.parameters()) < 1e-4
