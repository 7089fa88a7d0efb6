import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcno.autodiff import (PRIMITIVES, ParameterStore, Tape, backward, flat_gradient, grad_check,
                           gradients)


def _rand(rng, shape, complex_=False):
    x = rng.standard_normal(shape)
    if complex_:
        x = x + 1j * rng.standard_normal(shape)
    return x


def _inner(a, b):
    return float(np.real(np.sum(np.conj(a) * b)))


# name, input builders, attrs; each builder is (shape, complex?)
PRIMITIVE_CASES = [
    ("add", [((2, 4, 4, 3), False), ((2, 4, 4, 3), False)], {}),
    ("add", [((2, 4, 4, 3), False), ((3,), False)], {}),
    ("scale", [((2, 4, 4, 3), False)], {"factor": 1.7}),
    ("scale", [((2, 4, 3, 2), True)], {"factor": np.array([1.0 + 2.0j, -0.5j])}),
    ("channel_linear", [((2, 4, 4, 3), False), ((3, 5), False)], {}),
    ("conv2d_dilated", [((1, 8, 8, 2), False), ((3, 3, 2, 3), False), ((3,), False)],
     {"dilation": 3, "padding": "zero"}),
    ("conv2d_dilated", [((2, 7, 6, 2), False), ((3, 3, 2, 2), False)],
     {"dilation": 2, "padding": "circular"}),
    ("conv2d_dilated", [((1, 6, 6, 1), False), ((5, 5, 1, 2), False)],
     {"dilation": 1, "padding": "zero"}),
    ("gelu", [((2, 5, 5, 2), False)], {}),
    ("fft2", [((2, 8, 6, 2), False)], {}),
    ("fft2", [((1, 7, 5, 1), False)], {}),
    ("ifft2", [((2, 8, 4, 2), True)], {"shape": (8, 6)}),
    ("ifft2", [((1, 7, 3, 1), True)], {"shape": (7, 5)}),
    ("mode_mix", [((2, 8, 5, 3), True), ((2, 2, 3, 3, 4, 2), False)], {"modes": (2, 3)}),
    ("spectral_truncate", [((2, 8, 5, 2), True)], {"modes": (3, 2)}),
    ("sum", [((2, 3, 4, 2), False)], {"axis": (1, 2, 3)}),
    ("mean", [((2, 3, 4, 2), False)], {"axis": 1}),
    ("square", [((3, 4), False)], {}),
    ("sqrt", [((3, 4), False)], {}),
    ("concat_channels", [((2, 3, 3, 2), False), ((2, 3, 3, 1), False)], {}),
    ("slice_channels", [((2, 3, 3, 4), False)], {"start": 1, "stop": 3}),
]


def _forward(name, vals, attrs):
    prim = PRIMITIVES[name]
    out = prim.forward(vals, attrs)
    return out if not prim.saves else out[0]


@pytest.mark.parametrize("name,builders,attrs", PRIMITIVE_CASES,
                         ids=[f"{c[0]}-{i}" for i, c in enumerate(PRIMITIVE_CASES)])
class TestPrimitiveAdjoints:
    def _setup(self, rng, name, builders, attrs):
        vals = [_rand(rng, s, c) for s, c in builders]
        if name == "sqrt":
            vals[0] = np.abs(vals[0]) + 0.5
        out = _forward(name, vals, attrs)
        ybar = _rand(rng, np.shape(out), np.iscomplexobj(out))
        grads = PRIMITIVES[name].backward(ybar, vals, out, attrs, None)
        return vals, ybar, grads

    def test_vector_jacobian_consistency(self, rng, name, builders, attrs):
        vals, ybar, grads = self._setup(rng, name, builders, attrs)
        h = 1e-6
        for k in range(len(vals)):
            tangent = _rand(rng, vals[k].shape, np.iscomplexobj(vals[k]))
            up = [v.copy() for v in vals]
            dn = [v.copy() for v in vals]
            up[k] = up[k] + h * tangent
            dn[k] = dn[k] - h * tangent
            jv = (_forward(name, up, attrs) - _forward(name, dn, attrs)) / (2 * h)
            lhs = _inner(grads[k], tangent)
            rhs = _inner(ybar, jv)
            assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs), 1.0), (k, lhs, rhs)

    def test_backward_deterministic(self, rng, name, builders, attrs):
        vals, ybar, grads = self._setup(rng, name, builders, attrs)
        again = PRIMITIVES[name].backward(ybar, vals, _forward(name, vals, attrs), attrs, None)
        for a, b in zip(grads, again):
            assert np.array_equal(a, b)


class TestRecord:
    def test_add_self(self, rng):
        t = Tape()
        x = rng.standard_normal((2, 3, 3, 1))
        i = t.leaf(x)
        assert np.array_equal(t.value(t.add(i, i)), 2 * x)

    def test_gelu_zero(self):
        t = Tape()
        assert np.array_equal(t.value(t.gelu(t.leaf(np.zeros((1, 4, 4, 2))))), np.zeros((1, 4, 4, 2)))

    def test_channel_linear_identity(self, rng):
        t = Tape()
        x = rng.standard_normal((1, 4, 4, 3))
        assert np.array_equal(t.value(t.channel_linear(t.leaf(x), t.constant(np.eye(3)))), x)

    def test_topological_order(self, rng):
        t = Tape()
        a = t.leaf(rng.standard_normal((1, 4, 4, 2)))
        b = t.gelu(t.add(a, a))
        t.sum(t.square(b))
        for nid, node in enumerate(t.nodes):
            assert all(i < nid for i in node.inputs)

    def test_unknown_primitive(self):
        with pytest.raises(ValueError):
            Tape().record("matmul", [])

    def test_arity(self):
        t = Tape()
        a = t.leaf(np.zeros(3))
        with pytest.raises(ValueError):
            t.record("add", [a])

    def test_shape_mismatch(self):
        t = Tape()
        a = t.leaf(np.zeros((2, 3)))
        b = t.leaf(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            t.add(a, b)
        with pytest.raises(ValueError):
            t.channel_linear(t.leaf(np.zeros((1, 2, 2, 3))), t.leaf(np.zeros((4, 4))))


class TestBackward:
    def test_sum_gradient_ones(self, rng):
        t = Tape()
        x = t.leaf(rng.standard_normal((2, 3)))
        g = backward(t, t.sum(x))
        assert np.array_equal(g[x], np.ones((2, 3)))

    def test_gelu_slope_at_zero(self):
        t = Tape()
        x = t.leaf(np.zeros(1))
        g = backward(t, t.sum(t.gelu(x)))
        assert g[x][0] == 0.5

    def test_non_scalar_loss(self, rng):
        t = Tape()
        x = t.leaf(rng.standard_normal(3))
        with pytest.raises(ValueError):
            backward(t, t.square(x))

    def test_conv_dilated_finite_difference(self, rng):
        store = ParameterStore()
        store.register("x", rng.standard_normal((1, 8, 8, 1)))
        store.register("k", rng.standard_normal((3, 3, 1, 1)))
        target = rng.standard_normal((1, 8, 8, 1))

        def program(t, ids):
            y = t.conv2d(ids["x"], ids["k"], dilation=3)
            return t.sum(t.square(t.add(y, t.constant(-target))))

        assert grad_check(program, store, h=1e-5, n_coords=73) < 1e-6

    def test_linear_program_exact(self, rng):
        store = ParameterStore()
        store.register("w", rng.standard_normal((3, 2)))
        x = rng.standard_normal((1, 4, 4, 3))

        def program(t, ids):
            return t.sum(t.channel_linear(t.constant(x), ids["w"]))

        assert grad_check(program, store) < 1e-9

    def test_linearity_of_backward(self, rng):
        x = rng.standard_normal((1, 6, 6, 2))
        a, b = 0.7, -1.3

        def losses(t, i):
            l1 = t.sum(t.square(t.gelu(i)))
            l2 = t.sum(t.ifft2(t.fft2(t.square(i)), (6, 6)))
            return l1, l2

        t = Tape()
        i = t.leaf(x)
        l1, l2 = losses(t, i)
        comb = t.add(t.scale(l1, a), t.scale(l2, b))
        g = backward(t, comb)[i]
        t1 = Tape()
        i1 = t1.leaf(x)
        g1 = backward(t1, losses(t1, i1)[0])[i1]
        t2 = Tape()
        i2 = t2.leaf(x)
        g2 = backward(t2, losses(t2, i2)[1])[i2]
        assert np.max(np.abs(g - (a * g1 + b * g2))) <= 1e-10 * max(1.0, np.abs(g).max())

    def test_two_sweeps_bit_identical(self, rng):
        t = Tape()
        x = t.leaf(rng.standard_normal((1, 8, 8, 2)))
        k = t.leaf(rng.standard_normal((3, 3, 2, 2)))
        loss = t.sum(t.square(t.gelu(t.conv2d(x, k, dilation=2))))
        g1, g2 = backward(t, loss), backward(t, loss)
        assert all(np.array_equal(g1[i], g2[i]) for i in g1)

    def test_unreachable_leaf_gets_zero(self, rng):
        t = Tape()
        ids = {"a": t.leaf(rng.standard_normal(3)), "b": t.leaf(rng.standard_normal(2))}
        g = gradients(t, t.sum(ids["a"]), ids)
        assert np.array_equal(g["b"], np.zeros(2))

    def test_constants_not_differentiated(self, rng):
        t = Tape()
        c = t.constant(rng.standard_normal(3))
        x = t.leaf(rng.standard_normal(3))
        g = backward(t, t.sum(t.add(x, c)))
        assert set(g) == {x}


class TestParameterStore:
    @given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=5),
           st.integers(0, 2 ** 31 - 1))
    def test_flatten_round_trip(self, shapes, seed):
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        for i, s in enumerate(shapes):
            store.register(f"p{i}", rng.standard_normal(s))
        before = {k: v.copy() for k, v in store.items()}
        flat = store.flat()
        assert flat.size == store.size
        store.unflatten(flat * 1.0)
        assert all(np.array_equal(store[k], before[k]) for k in before)

    def test_registration_order(self):
        store = ParameterStore()
        for name in ("z", "a", "m"):
            store.register(name, np.zeros(1))
        assert store.names() == ["z", "a", "m"]

    def test_duplicate_registration(self):
        store = ParameterStore()
        store.register("a", np.zeros(1))
        with pytest.raises(KeyError):
            store.register("a", np.zeros(1))

    def test_flat_gradient_alignment(self, rng):
        store = ParameterStore()
        store.register("a", rng.standard_normal((2, 2)))
        store.register("b", rng.standard_normal(3))
        g = flat_gradient(store, {"b": np.arange(3.0), "a": np.full((2, 2), 7.0)})
        assert np.array_equal(g, [7, 7, 7, 7, 0, 1, 2])
