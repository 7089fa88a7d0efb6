import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcno.autodiff import ParameterStore, Tape, backward, grad_check
from dcno.layers import (DCNO, ConvBlockParams, ModelConfig, Normalizer, SpectralLayerParams,
                         build_model, coordinate_channels, conv_layer_forward, count_parameters,
                         decoder_forward, encoder_forward, init_parameters, parameter_shapes,
                         spectral_layer_forward)
from dcno.layers import spectral_layer as spectral_layer_tape
from dcno.tensor import Field2D, lattice_points, resample_linear

from _support import signal_preserving, squared_error_program

TABLE3_PATTERNS = ["FCFCFCF", "FFFFFFF", "CCCCCCC", "CCCCCCF", "FCCCCCC", "CFFFFFF", "FFFFFFC",
                   "FFFFCCC", "CCCFFFF"]


def gelu(x):
    from scipy.special import erf
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def naive_spectral(v, R, W, b, activation=True):
    """Kept-mode mixing evaluated straight from the DFT sums."""
    h, w, d = v.shape
    m1, m2 = R.shape[1:3]
    i = np.arange(h)
    j = np.arange(w)
    e1 = np.exp(-2j * np.pi * np.outer(i, i) / h)  # [k1, x1]
    e2 = np.exp(-2j * np.pi * np.outer(j, j) / w)
    coeffs = np.einsum("ai,bj,ijc->abc", e1, e2, v)
    out = np.zeros((h, w, R.shape[4]))
    rows = [(0, k) for k in range(m1)] + [(1, h - m1 + k) for k in range(m1)]
    for corner, k1 in rows:
        for k2 in range(m2):
            mixed = coeffs[k1, k2] @ R[corner, k1 if corner == 0 else k1 - (h - m1), k2]
            mult = 1.0 if (k2 == 0 or 2 * k2 == w) else 2.0
            phase = np.exp(2j * np.pi * (k1 * i[:, None] / h + k2 * j[None, :] / w))
            out += mult * np.real(phase[:, :, None] * mixed[None, None, :]) / (h * w)
    out = out + v @ W + b
    return gelu(out) if activation else out


class TestSpectralLayer:
    def test_full_band_identity(self, rng):
        v = rng.standard_normal((8, 8, 3))
        R = np.zeros((2, 4, 5, 3, 3), dtype=complex)
        R[...] = np.eye(3)
        p = SpectralLayerParams(R, np.zeros((3, 3)), np.zeros(3), True)
        out = spectral_layer_forward(Field2D(v), p).data
        assert np.max(np.abs(out - gelu(v))) < 1e-12

    def test_high_mode_annihilated(self, rng):
        n = 16
        x = lattice_points(n, 1.0, "vertex")
        v = np.cos(2 * np.pi * 6 * x)[:, None, None] * np.ones((1, n, 2))
        R = rng.standard_normal((2, 3, 3, 2, 2)) + 1j * rng.standard_normal((2, 3, 3, 2, 2))
        p = SpectralLayerParams(R, np.zeros((2, 2)), np.zeros(2), True)
        out = spectral_layer_forward(Field2D(v, lattice="vertex"), p).data
        assert np.max(np.abs(out)) < 1e-12

    @pytest.mark.parametrize("shape,modes", [((16, 16), (4, 5)), ((12, 10), (3, 6)), ((9, 7), (2, 3))])
    def test_naive_oracle(self, rng, shape, modes):
        d = 3
        v = rng.standard_normal(shape + (d,))
        R = rng.standard_normal((2,) + modes + (d, d)) + 1j * rng.standard_normal((2,) + modes + (d, d))
        W = rng.standard_normal((d, d))
        b = rng.standard_normal(d)
        for act in (True, False):
            out = spectral_layer_forward(Field2D(v), SpectralLayerParams(R, W, b, act)).data
            assert np.max(np.abs(out - naive_spectral(v, R, W, b, act))) < 1e-10

    def test_below_cutoff_rejected(self, rng):
        R = np.zeros((2, 6, 6, 1, 1), dtype=complex)
        with pytest.raises(ValueError):
            spectral_layer_forward(Field2D(np.zeros((8, 8, 1))), SpectralLayerParams(R, np.eye(1), np.zeros(1)))

    def test_resolution_invariance(self, rng):
        d, modes = 2, (4, 4)
        R = rng.standard_normal((2,) + modes + (d, d)) + 1j * rng.standard_normal((2,) + modes + (d, d))
        p = SpectralLayerParams(R, rng.standard_normal((d, d)), rng.standard_normal(d), True)

        def field(n):
            x = lattice_points(n, 1.0, "vertex")
            g1, g2 = np.meshgrid(x, x, indexing="ij")
            a = np.sin(2 * np.pi * g1) + 0.5 * np.cos(2 * np.pi * (2 * g1 - 3 * g2))
            return Field2D(np.stack([a, np.cos(2 * np.pi * g2)], axis=-1), lattice="vertex")

        coarse = spectral_layer_forward(field(16), p)
        fine = spectral_layer_forward(field(32), p)
        assert np.max(np.abs(resample_linear(fine, 16, 16).data - coarse.data)) < 1e-6


def _delta_blocks(dilations, c=4):
    kern = np.zeros((3, 3, c, c))
    kern[1, 1] = np.eye(c)
    return [ConvBlockParams(r, [kern.copy() for _ in range(3)], [np.zeros(c) for _ in range(3)])
            for r in dilations]


class TestConvLayer:
    def test_delta_kernels_double(self, rng):
        v = 6 + rng.random((10, 10, 4)) * 3
        out = conv_layer_forward(Field2D(v), _delta_blocks((1, 3, 9, 3, 1))).data
        assert np.max(np.abs(out - 2 * v)) < 1e-6

    def test_zero_path_is_identity(self, rng):
        v = rng.standard_normal((8, 8, 4))
        blocks = [ConvBlockParams(r, [np.zeros((3, 3, 4, 4))] * 3, [np.zeros(4)] * 3) for r in (1, 3)]
        assert np.array_equal(conv_layer_forward(Field2D(v), blocks).data, v)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv_layer_forward(Field2D(np.zeros((8, 8, 3))), _delta_blocks((1,), c=4))

    def test_receptive_field_9x9(self, rng):
        t = Tape()
        x = t.leaf(rng.standard_normal((1, 21, 21, 1)))
        k1 = t.constant(rng.standard_normal((3, 3, 1, 1)))
        k2 = t.constant(rng.standard_normal((3, 3, 1, 1)))
        y = t.conv2d(t.conv2d(x, k1, dilation=1), k2, dilation=3)
        g = backward(t, t.sum(_pick(t, y, 10, 10)))[x][0, :, :, 0]
        support = np.argwhere(g != 0)
        assert support.min(axis=0).tolist() == [6, 6]
        assert support.max(axis=0).tolist() == [14, 14]
        assert support.shape[0] == 81

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 31 - 1))
    def test_receptive_field_bound(self, dilations, seed):
        rng = np.random.default_rng(seed)
        reach = sum(dilations)
        n = 2 * reach + 5
        c = n // 2
        blocks = [ConvBlockParams(r, [rng.standard_normal((3, 3, 1, 1))], [np.zeros(1)]) for r in dilations]
        v = rng.standard_normal((n, n, 1))
        base = conv_layer_forward(Field2D(v), blocks).data[c, c]
        for i, j in [(c - reach - 1, c), (c, c + reach + 1), (0, 0), (n - 1, c - reach - 1)]:
            if 0 <= i < n and 0 <= j < n and max(abs(i - c), abs(j - c)) > reach:
                w = v.copy()
                w[i, j] += 5.0
                assert np.array_equal(conv_layer_forward(Field2D(w), blocks).data[c, c], base)


def _pick(t, y, i, j):
    mask = np.zeros(t.value(y).shape)
    mask[0, i, j, 0] = 1.0
    return t.scale(y, mask)


class TestEncoderDecoder:
    def _cfg(self, **kw):
        base = dict(width=8, modes=(4, 4), conv_width=8, ffn_hidden=16)
        base.update(kw)
        return ModelConfig(**base)

    def test_encoder_shape(self, rng):
        cfg = self._cfg()
        out = encoder_forward(Field2D(rng.standard_normal((64, 64, 1))), init_parameters(cfg, 0))
        assert out.data.shape == (64, 64, 8)

    def test_encoder_zero_weights(self, rng):
        params = init_parameters(self._cfg(), 0)
        params.unflatten(np.zeros(params.size))
        out = encoder_forward(Field2D(rng.standard_normal((16, 16, 1))), params)
        assert np.array_equal(out.data, np.zeros((16, 16, 8)))

    @pytest.mark.parametrize("lattice", ["cell", "vertex"])
    def test_coordinate_corners(self, lattice):
        h, w = 8, 6
        c = coordinate_channels(1, h, w, lattice)[0]
        x1, x2 = lattice_points(h, 1.0, lattice), lattice_points(w, 1.0, lattice)
        for i, j in [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]:
            assert c[i, j].tolist() == [x1[i], x2[j]]
        if lattice == "cell":
            assert c[0, 0].tolist() == [1 / 16, 1 / 12]

    def test_decoder_shape(self, rng):
        cfg = self._cfg(out_channels=2)
        out = decoder_forward(Field2D(rng.standard_normal((64, 64, 8))), init_parameters(cfg, 0), cfg.modes)
        assert out.data.shape == (64, 64, 2)

    def test_decoder_zero_params(self, rng):
        params = init_parameters(self._cfg(), 0)
        params.unflatten(np.zeros(params.size))
        out = decoder_forward(Field2D(rng.standard_normal((16, 16, 8))), params, (4, 4))
        assert np.array_equal(out.data, np.zeros((16, 16, 1)))

    def test_decoder_pointwise_oracle(self, rng):
        cfg = self._cfg()
        params = init_parameters(cfg, 3)
        for name in ("dec.F0", "dec.F1"):
            params[f"{name}.R"] = np.zeros_like(params[f"{name}.R"])
            params[f"{name}.W"] = np.eye(8)
            params[f"{name}.b"] = np.zeros(8)
        v = rng.standard_normal((16, 16, 8))
        out = decoder_forward(Field2D(v), params, cfg.modes).data
        z = gelu(gelu(v) @ params["dec.ffn0.w"] + params["dec.ffn0.b"])
        z = gelu(z @ params["dec.ffn1.w"] + params["dec.ffn1.b"])
        z = z @ params["dec.ffn2.w"] + params["dec.ffn2.b"]
        assert np.max(np.abs(out - z)) < 1e-12


class TestModel:
    def test_default_layer_counts(self):
        cfg = ModelConfig()
        assert build_model(cfg, 0).layer_counts() == {"F": 4, "C": 3}
        assert build_model(ModelConfig(pattern="FFFFFFF"), 0).layer_counts() == {"F": 7, "C": 0}

    def test_invalid_pattern(self):
        with pytest.raises(ValueError, match="invalid pattern"):
            ModelConfig(pattern="FXC")
        with pytest.raises(ValueError):
            ModelConfig(pattern="")
        with pytest.raises(ValueError):
            ModelConfig(dilations=(1, 0))

    def test_seed_determinism(self):
        a = init_parameters(ModelConfig(), 5)
        b = init_parameters(ModelConfig(), 5)
        assert a.names() == b.names()
        assert np.array_equal(a.flat(), b.flat())

    def test_registration_order_is_config_function(self):
        cfg = ModelConfig(pattern="CFC", width=16)
        assert list(parameter_shapes(cfg)) == init_parameters(cfg, 1).names()

    def test_adapters_when_width_differs(self):
        shapes = parameter_shapes(ModelConfig(pattern="FCF", width=16))
        adapters = [k for k in shapes if k.endswith(".A")]
        assert [shapes[k] for k in adapters] == [(16, 32), (32, 16)]
        assert not [k for k in parameter_shapes(ModelConfig()) if k.endswith(".A")]

    def test_init_scales(self):
        cfg = ModelConfig(width=16)
        p = init_parameters(cfg, 0)
        conv = p["enc.conv1.w"]
        assert np.abs(conv).max() <= 1 / np.sqrt(9 * 16)
        assert np.all(p["proc0.F.b"] == 0)
        r = p["proc0.F.R"]
        assert abs(r.std() * 16 ** 2 - 1) < 0.05

    def test_normalizer_round_trip(self, rng):
        norm = Normalizer.fit(rng.standard_normal((4, 8, 8, 2)) * 3 + 1, rng.standard_normal((4, 8, 8, 1)))
        back = Normalizer.from_mapping(norm.to_mapping())
        for k in ("in_mean", "in_std", "out_mean", "out_std"):
            assert np.array_equal(getattr(back, k), getattr(norm, k))


class TestParameterCounts:
    @pytest.mark.parametrize("dilations,kernel,expected", [
        ((1, 3, 9, 3, 1), 3, 138720), ((1, 3, 9), 3, 83232), ((1, 3, 1), 3, 83232),
        ((1, 1, 1), 3, 83232), ((1,), 3, 27744), ((1,), 9, 248928),
    ])
    def test_table(self, dilations, kernel, expected):
        assert count_parameters("c-layers", ModelConfig(dilations=dilations, kernel_size=kernel)) == expected

    @given(st.lists(st.integers(1, 9), min_size=1, max_size=7), st.sampled_from([1, 3, 5, 7, 9]))
    def test_formula(self, dilations, k):
        n = len(dilations)
        cfg = ModelConfig(dilations=tuple(dilations), kernel_size=k)
        assert count_parameters("c-layers", cfg) == n * 3 * (k * k * 32 * 32 + 32)

    def test_spectral_layer_count(self):
        d, m = 32, 12
        cfg = ModelConfig(pattern="F")
        per = sum(int(np.prod(s)) for k, s in parameter_shapes(cfg).items() if k.startswith("proc0."))
        assert per == 2 * m * m * d * d * 2 + d * d + d

    def test_total_matches_store(self):
        cfg = ModelConfig()
        assert count_parameters("all", cfg) == init_parameters(cfg, 0).size == 3992449


class TestGradients:
    def _check(self, model, x, y, **kw):
        params = signal_preserving(model.params)
        model = DCNO(model.cfg, params, model.normalizer)
        return grad_check(squared_error_program(model, x, y), params, **kw)

    def test_single_f_layer(self, rng):
        store = ParameterStore()
        d = 3
        store.register("R", rng.standard_normal((2, 3, 3, d, d, 2)))
        store.register("W", rng.standard_normal((d, d)))
        store.register("b", rng.standard_normal(d))
        v = rng.standard_normal((2, 8, 8, d))

        def program(t, ids):
            out = spectral_layer_tape(t, t.constant(v), ids["R"], ids["W"], ids["b"], (3, 3))
            return t.sum(t.square(out))

        assert grad_check(program, store, n_coords=60) < 1e-5

    def test_full_fcfcfcf_16(self, rng):
        # 16x16 keeps at most 8 rows of modes per corner
        model = build_model(ModelConfig(modes=(8, 8)), 0)
        x, y = rng.standard_normal((2, 1, 16, 16, 1))
        assert self._check(model, x, y, h=1e-5, n_coords=40) < 1e-4

    @pytest.mark.parametrize("pattern", TABLE3_PATTERNS)
    def test_table3_patterns_32(self, rng, pattern):
        model = build_model(ModelConfig(pattern=pattern), 2)
        x, y = rng.standard_normal((2, 1, 32, 32, 1))
        tape = Tape()
        assert tape.value(model.forward(tape, tape.leaves(model.params), x)).shape == (1, 32, 32, 1)
        assert self._check(model, x, y, n_coords=10, seed=3) < 1e-4

    def test_circular_padding_model(self, rng):
        cfg = ModelConfig(pattern="FC", width=8, modes=(3, 3), conv_width=8, ffn_hidden=8,
                          padding="circular", lattice="vertex")
        model = build_model(cfg, 0)
        x, y = rng.standard_normal((2, 2, 12, 12, 1))
        assert self._check(model, x, y, n_coords=40) < 1e-4

    def test_predict_matches_forward(self, rng):
        model = build_model(ModelConfig(width=8, modes=(3, 3), conv_width=8, ffn_hidden=8), 0)
        x = rng.standard_normal((3, 12, 12, 1))
        tape = Tape()
        ref = tape.value(model.forward(tape, tape.leaves(model.params), x))
        assert np.array_equal(model.predict(x, batch_size=3), ref)
