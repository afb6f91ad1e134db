import numpy as np
import pytest

from craft.numerics import SeededRng
from craft.prompt import (DEFAULT_PROMPT_LENGTH, DEFAULT_SUBSPACE_DIM, PromptError, PromptSpec,
                          build_prompts, make_spec, materialize, new_projection)


@pytest.fixture
def spec():
    rng = np.random.default_rng(0)
    return make_spec(rng.normal(size=(4, 16)), rng.normal(size=(10, 16)), d0=16, seed=3)


def test_projection_shape():
    assert new_projection(SeededRng(0), 4, 16, 16, 0.02).shape == (64, 16)


def test_projection_deterministic():
    assert np.array_equal(new_projection(5, 2, 3, 7), new_projection(5, 2, 3, 7))


def test_projection_zero_dims():
    with pytest.raises(PromptError):
        new_projection(SeededRng(0), 0, 16, 16)
    with pytest.raises(PromptError):
        new_projection(SeededRng(0), 4, 16, 0)


def test_defaults():
    assert DEFAULT_PROMPT_LENGTH == 4
    assert DEFAULT_SUBSPACE_DIM == 512


def test_projection_std():
    a = new_projection(SeededRng(1), 4, 128, 512, 0.02)
    assert 0.0195 < a.std() < 0.0205


def test_zero_std_ignores_latent(spec):
    flat = make_spec(spec.p0, spec.class_embeddings, d0=16, seed=1, std=0.0)
    z = np.random.default_rng(1).normal(size=16)
    assert np.array_equal(materialize(flat, z), spec.p0)


def test_zero_latent_gives_p0(spec):
    assert np.array_equal(materialize(spec, np.zeros(16)), spec.p0)


def test_identity_projection():
    p0 = np.arange(6.0).reshape(2, 3)
    s = PromptSpec(p0, np.eye(6), np.ones((2, 3)))
    z = np.arange(6.0) * 10
    np.testing.assert_array_equal(materialize(s, z), p0 + z.reshape(2, 3))


def test_linearity(spec):
    rng = np.random.default_rng(2)
    for _ in range(20):
        z1, z2 = rng.normal(size=16), rng.normal(size=16)
        lhs = materialize(spec, z1) + materialize(spec, z2) - spec.p0
        np.testing.assert_allclose(lhs, materialize(spec, z1 + z2), atol=1e-12)


def test_wrong_latent_length(spec):
    with pytest.raises(PromptError):
        materialize(spec, np.zeros(15))


def test_build_prompts_structure(spec):
    z = np.random.default_rng(3).normal(size=16)
    seqs = build_prompts(spec, z)
    assert seqs.shape == (10, 5, 16)
    for k in range(10):
        np.testing.assert_array_equal(seqs[k, :4], materialize(spec, z))
        np.testing.assert_array_equal(seqs[k, 4], spec.class_embeddings[k])


def test_single_class_zero_latent():
    p0 = np.ones((2, 3))
    c = np.full((1, 3), 7.0)
    seqs = build_prompts(make_spec(p0, c, d0=4), np.zeros(4))
    np.testing.assert_array_equal(seqs[0], np.vstack([p0, c]))


def test_spec_is_frozen(spec):
    with pytest.raises(ValueError):
        spec.projection[0, 0] = 1.0


def test_shape_validation():
    with pytest.raises(PromptError):
        PromptSpec(np.zeros((2, 3)), np.zeros((5, 4)), np.zeros((2, 3)))
    with pytest.raises(PromptError):
        PromptSpec(np.zeros((2, 3)), np.zeros((6, 4)), np.zeros((2, 4)))
