import numpy as np
import pytest

from disagg.model import GradientTape, ScorerModel, init_model


def fd_check(model, X, upstream, h=1e-5):
    """Relative error between backward() and central differences of sum(upstream * score)."""
    _, cache = model.forward(X)
    analytic = np.concatenate([g.ravel() for g in model.backward(cache, upstream)])
    theta = model.flat_params()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        model.set_flat_params(up)
        fu = float(upstream @ model.score(X))
        model.set_flat_params(dn)
        fd = float(upstream @ model.score(X))
        numeric[i] = (fu - fd) / (2 * h)
    model.set_flat_params(theta)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric))


def random_model(rng, d=8, h1=4, h2=3, head="binary", L=1):
    m = init_model(int(rng.integers(1 << 30)), d, h1, h2, head=head, L=L)
    m.set_flat_params(rng.normal(0, 0.7, m.n_params))
    return m


class TestForward:
    def test_zero_weights_sigmoid(self):
        m = init_model(0, 5, 4, 3)
        m.set_flat_params(np.zeros(m.n_params))
        np.testing.assert_array_equal(m.score(np.random.default_rng(0).normal(size=(3, 5))), 0.5)

    def test_zero_weights_integer_head(self):
        m = init_model(0, 5, 4, 3, head="integer", L=4)
        m.set_flat_params(np.zeros(m.n_params))
        assert m.score(np.ones(5))[0] == 2.0

    def test_deterministic_init(self):
        x = np.linspace(-1, 1, 12)
        assert init_model(3, 12).score(x)[0] == init_model(3, 12).score(x)[0]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            init_model(0, 4).score(np.ones(5))

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            init_model(0, 2).score([np.nan, 1.0])

    @pytest.mark.parametrize("head,L", [("binary", 1), ("integer", 4)])
    def test_output_range(self, head, L):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = random_model(rng, head=head, L=L)
            s = m.score(rng.normal(0, 3, size=(50, 8)))
            assert np.all((s >= 0) & (s <= L))
            assert np.all(np.isfinite(s))

    def test_pure(self):
        m = init_model(2, 6)
        X = np.random.default_rng(0).normal(size=(4, 6))
        before = m.flat_params().copy()
        a, b = m.score(X), m.score(X)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(m.flat_params(), before)


class TestBackward:
    @pytest.mark.parametrize("head,L", [("binary", 1), ("integer", 4)])
    def test_finite_differences(self, head, L):
        rng = np.random.default_rng(7)
        for _ in range(5):
            m = random_model(rng, head=head, L=L)
            X = rng.normal(size=(6, 8))
            assert fd_check(m, X, rng.normal(size=6)) < 1e-4

    def test_single_instance_8_4_3_1(self):
        rng = np.random.default_rng(11)
        m = random_model(rng)
        assert fd_check(m, rng.normal(size=(1, 8)), np.array([1.0])) < 1e-4

    def test_zero_upstream_leaves_tape(self):
        m = init_model(0, 8, 4, 3)
        tape = GradientTape(m)
        _, cache = m.forward(np.ones((2, 8)))
        m.backward(cache, np.zeros(2), tape)
        assert not tape.flat().any()

    def test_accumulation_is_linear(self):
        rng = np.random.default_rng(3)
        m = random_model(rng)
        X = rng.normal(size=(3, 8))
        g = rng.normal(size=3)
        _, cache = m.forward(X)
        twice, once = GradientTape(m), GradientTape(m)
        m.backward(cache, g, twice)
        m.backward(cache, g, twice)
        m.backward(cache, 2 * g, once)
        np.testing.assert_allclose(twice.flat(), once.flat(), rtol=1e-14, atol=1e-15)

    def test_missing_cache(self):
        with pytest.raises(ValueError, match="cache"):
            init_model(0, 3).backward(None, np.ones(1))


class TestInit:
    def test_same_seed(self):
        np.testing.assert_array_equal(init_model(5, 10).flat_params(), init_model(5, 10).flat_params())

    def test_different_seeds(self):
        assert not np.array_equal(init_model(5, 10).flat_params(), init_model(6, 10).flat_params())

    def test_parameter_count(self):
        # 768*64 + 64 + 64*32 + 32 + 32 + 1
        assert init_model(0, 768, 64, 32).n_params == 51_329

    def test_biases_zero_and_scaled_weights(self):
        m = init_model(0, 100, 20, 10)
        W1, b1, W2, b2, W3, b3 = m.params
        assert not b1.any() and not b2.any() and not b3.any()
        assert np.abs(W1).max() <= 0.1 and np.abs(W2).max() <= 1 / np.sqrt(20)
        assert abs(W1.mean()) < 0.01  # symmetric

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            init_model(0, 4, 0, 3)


class TestCheckpoint:
    @pytest.mark.parametrize("head,L", [("binary", 1), ("integer", 3)])
    def test_round_trip(self, tmp_path, head, L):
        m = random_model(np.random.default_rng(0), head=head, L=L)
        m.save(tmp_path / "m.bin")
        back = ScorerModel.load(tmp_path / "m.bin")
        np.testing.assert_array_equal(back.flat_params(), m.flat_params())
        assert (back.head, back.L, back.seed, back.sizes) == (m.head, m.L, m.seed, m.sizes)
        assert back.to_bytes() == m.to_bytes()

    def test_little_endian_body(self):
        m = init_model(1, 3, 2, 2)
        blob = m.to_bytes()
        body = blob[-8 * m.n_params :]
        np.testing.assert_array_equal(np.frombuffer(body, dtype="<f8"), m.flat_params())

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            ScorerModel.from_bytes(b"hello")
