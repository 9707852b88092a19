import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spcaps.capsroute import CapsuleState, dynamic_routing
from spcaps.explain import (
    contribution, contributions_csv, normalize_column, overlay, render_contribution, weighted_contribution,
)
from spcaps.slic import Segmentation
from spcaps.tensorio import Image, Space


def state_from(u_hat, v):
    S, J, _ = u_hat.shape
    return CapsuleState(u=None, u_hat=u_hat[None], mask=np.ones((1, S), bool), b=None,
                        c=np.full((1, S, J), 1.0 / J), s=None, v=v[None])


def test_projection_examples():
    v = np.array([[0.3, 0.4], [0.0, 0.0]])
    u_hat = np.array([[[-0.4, 0.3], [1.0, 1.0]], [[0.3, 0.4], [2.0, 0.0]]])
    cm = contribution(state_from(u_hat, v))
    assert cm.z[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert cm.z[1, 0] == pytest.approx(0.5)
    assert cm.degenerate.tolist() == [False, True]
    assert np.all(cm.z[:, 1] == 0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_weighted_identity(seed):
    rng = np.random.default_rng(seed)
    S, J, K = rng.integers(1, 10), rng.integers(2, 5), rng.integers(1, 8)
    mask = rng.random(S) < 0.8
    mask[0] = True
    u_hat = rng.standard_normal((S, J, K)) * mask[:, None, None]
    st_ = dynamic_routing(u_hat, mask, 3)
    cm = contribution(st_)
    lhs = weighted_contribution(st_, cm)
    np.testing.assert_allclose(lhs, np.linalg.norm(st_.s[0], axis=-1), atol=1e-9)
    assert np.all(cm.z[~mask] == 0)


def test_scaling_preserves_ranking():
    rng = np.random.default_rng(1)
    u_hat = rng.standard_normal((8, 3, 4))
    st_ = dynamic_routing(u_hat, iterations=3)
    z1 = contribution(st_).z
    st_.u_hat = st_.u_hat * 2.5  # frozen c and v
    z2 = contribution(st_).z
    np.testing.assert_allclose(z2, 2.5 * z1)
    for j in range(3):
        np.testing.assert_array_equal(np.argsort(z1[:, j]), np.argsort(z2[:, j]))


def test_render_rules():
    labels = np.array([[0, 0, 1], [2, 2, 1]])
    seg = Segmentation(labels, 3)
    z = np.array([[1.0, 5.0], [1.0, -2.0], [1.0, 0.0]])
    flat = render_contribution(z, 0, seg)
    assert flat.flat and np.all(flat.image.data == 128)
    hot = render_contribution(z, 1, seg)
    assert not hot.flat and hot.image.space == Space.GRAY
    img = hot.image.data[:, :, 0]
    assert img[0, 0] == 255 and img[0, 2] == 0 and img[1, 0] == round(2 / 7 * 255)
    for k in range(3):
        assert len(np.unique(img[labels == k])) == 1
    one = render_contribution(np.array([[3.0, 1.0]]), 1, Segmentation(np.zeros((4, 4), int), 1))
    assert np.all(one.image.data == 128)
    with pytest.raises(ValueError):
        render_contribution(z, 2, seg)


def test_normalize_ignores_masked_rows():
    col = np.array([0.0, 10.0, 100.0])
    scaled, flat = normalize_column(col, np.array([True, True, False]))
    assert not flat and scaled[:2].tolist() == [0.0, 255.0]


def test_overlay_and_csv():
    heat = Image.gray(np.array([[0, 255]]))
    base = Image.rgb(np.array([[[100, 100, 100], [0, 0, 0]]]))
    out = overlay(heat, base).data
    assert out[0, 0].tolist() == [193, 40, 40]
    assert out[0, 1].tolist() == [153, 153, 0]
    with pytest.raises(ValueError):
        overlay(heat, heat)
    text = contributions_csv(np.array([[0.5, -1.0], [0.0, 0.0]]), np.array([True, False]))
    assert text.splitlines() == ["superpixel,valid,class0,class1", "0,1,0.5,-1", "1,0,0,0"]
