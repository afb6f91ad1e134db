import numpy as np
import pytest

from craft.numerics import SeededRng, cross_entropy
from gradcheck import MODES, max_relative_error, random_point
from craft.refinement import (AdamWState, RefinementError, adamw_step, backward, forward,
                              init_refiner, load_checkpoint, predict, refine_loss,
                              save_checkpoint, train_epoch)

def randomized(arch, residual, k=5, hidden=16, seed=0):
    # the zero-init output layer would hide most of the chain from the check
    p = init_refiner(seed, k, hidden, arch, residual)
    rng = np.random.default_rng(seed)
    for name, t in p.tensors.items():
        t[...] = rng.normal(scale=0.5, size=t.shape)
    return p


@pytest.mark.parametrize("arch,residual", MODES)
@pytest.mark.parametrize("seed", range(5))
def test_finite_differences(arch, residual, seed):
    worst, _ = max_relative_error(*random_point(seed, arch, residual))
    assert worst <= 1e-4


def test_finite_difference_error_is_second_order():
    # at a sharper point the h = 1e-3 check is truncation-limited; shrinking h
    # tenfold must cut the error far more than tenfold if the gradient is exact
    errs = [max_relative_error(*random_point(2, "mlp", False, weight_std=0.3, input_std=3.0),
                               h=h)[0] for h in (1e-2, 1e-3)]
    assert errs[0] / errs[1] > 30


def test_identity_at_init():
    p = init_refiner(3, 10)
    y = np.random.default_rng(0).normal(scale=10, size=(50, 10))
    assert np.array_equal(predict(p, y), y)
    assert np.array_equal(np.argmax(predict(p, y), 1), np.argmax(y, 1))


def test_init_layout():
    p = init_refiner(0, 10, 32)
    assert p.count() == 1738
    assert np.all(p.tensors["W3"] == 0) and np.all(p.tensors["b3"] == 0)
    assert np.all(p.tensors["b1"] == 0) and np.all(p.tensors["b2"] == 0)
    assert 0.015 < p.tensors["W2"].std() < 0.025
    assert init_refiner(0, 10).hidden == 512


def test_no_residual_outputs_residual_only():
    p = randomized("mlp", False)
    y = np.random.default_rng(2).normal(size=(3, 5))
    q = p.copy()
    q.residual = True
    np.testing.assert_allclose(predict(q, y) - y, predict(p, y), atol=1e-12)


def test_linear_mode():
    p = randomized("linear", True)
    y = np.random.default_rng(3).normal(size=(4, 5))
    expected = y + y @ p.tensors["W"].T + p.tensors["b"]
    np.testing.assert_allclose(predict(p, y), expected, atol=1e-12)


def test_unknown_arch():
    with pytest.raises(RefinementError):
        init_refiner(0, 3, arch="conv")


def test_non_finite_input():
    with pytest.raises(RefinementError):
        forward(init_refiner(0, 3, 4), np.array([[0.0, np.nan, 1.0]]))


def test_cache_mismatch():
    a, b = init_refiner(0, 3, 4), init_refiner(1, 3, 4)
    _, cache = forward(a, np.zeros((2, 3)))
    with pytest.raises(RefinementError):
        backward(b, cache, np.zeros((2, 3)))


def test_zero_upstream_gradient():
    p = randomized("mlp", True)
    _, cache = forward(p, np.ones((3, 5)))
    assert all(np.all(g == 0) for g in backward(p, cache, np.zeros((3, 5))).values())


def test_duplicated_batch_mean_gradient():
    p = randomized("mlp", True)
    rng = np.random.default_rng(4)
    y, labels = rng.normal(size=(4, 5)), rng.integers(0, 5, 4)
    out, cache = forward(p, y)
    g1 = backward(p, cache, refine_loss(out, y, labels, 0.1)[1])
    y2, l2 = np.vstack([y, y]), np.concatenate([labels, labels])
    out2, cache2 = forward(p, y2)
    g2 = backward(p, cache2, refine_loss(out2, y2, l2, 0.1)[1])
    for name in g1:
        np.testing.assert_allclose(g1[name], g2[name], atol=1e-12)


def test_loss_reduces_to_ce():
    rng = np.random.default_rng(5)
    yo, yi = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    labels = rng.integers(0, 4, 7)
    assert refine_loss(yo, yi, labels, 0.0)[0] == cross_entropy(yo, labels)
    assert refine_loss(yo, yo, labels, 0.3)[0] == pytest.approx(cross_entropy(yo, labels), abs=1e-14)


class TestAdamW:
    def _single(self, w, g, wd):
        p = init_refiner(0, 1, arch="linear")
        p.tensors["W"][...] = w
        st = AdamWState(weight_decay=wd)
        adamw_step(p, {"W": np.full((1, 1), g), "b": np.zeros(1)}, st)
        return p.tensors["W"][0, 0]

    def test_first_step(self):
        assert self._single(0.0, 1.0, 0.0) == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)
        assert self._single(0.0, 1.0, 0.0) == pytest.approx(-0.00099999999, abs=1e-13)

    def test_zero_gradient_no_decay(self):
        assert self._single(0.7, 0.0, 0.0) == 0.7

    def test_pure_decay(self):
        assert self._single(0.7, 0.0, 0.01) == pytest.approx(0.7 * (1 - 1e-3 * 0.01), abs=1e-16)

    def test_shape_mismatch(self):
        p = init_refiner(0, 2, arch="linear")
        with pytest.raises(RefinementError):
            adamw_step(p, {"W": np.zeros((3, 3)), "b": np.zeros(2)}, AdamWState())


@pytest.mark.parametrize("seed", range(20))
def test_fixed_batch_loss_decreases(seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(scale=3, size=(64, 10))
    labels = rng.integers(0, 10, 64)
    p = init_refiner(seed, 10, 64)
    opt = AdamWState()
    losses = []
    for _ in range(11):
        out, cache = forward(p, y)
        loss, g = refine_loss(out, y, labels, 0.01)
        losses.append(loss)
        adamw_step(p, backward(p, cache, g), opt)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_epoch_runs():
    rng = np.random.default_rng(6)
    y, labels = rng.normal(size=(100, 4)), rng.integers(0, 4, 100)
    p = init_refiner(0, 4, 8)
    first = train_epoch(p, AdamWState(lr=1e-2), y, labels, 0.0, 32, SeededRng(0))
    assert np.isfinite(first)


@pytest.mark.parametrize("arch,residual", MODES)
def test_checkpoint_roundtrip(tmp_path, arch, residual):
    p = randomized(arch, residual)
    path = tmp_path / "r.bin"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert (q.arch, q.residual, q.num_classes) == (arch, residual, 5)
    for name in p.tensors:
        assert np.array_equal(p.tensors[name], q.tensors[name])


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "r.bin"
    save_checkpoint(init_refiner(0, 3, 4), path)
    data = path.read_bytes()
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(RefinementError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(data[:-8])
    with pytest.raises(RefinementError, match="truncated"):
        load_checkpoint(path)
