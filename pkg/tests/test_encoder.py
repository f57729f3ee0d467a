import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from sharedfusion.encoder import EncoderConfig, Sharing, build_encoder, count_params, encode_pair, expected_encoder_params
from sharedfusion.errors import ConfigError, DimensionError
from sharedfusion.numcore import Tensor


@pytest.fixture
def shared():
    return build_encoder(EncoderConfig(sharing="shared"), seed=0)


@pytest.fixture
def individual():
    return build_encoder(EncoderConfig(sharing="individual"), seed=0)


def _hand_count(in_channels, stage_channels, kernel):
    total, prev = 0, in_channels
    for c in stage_channels:
        total += prev * c * kernel * kernel + c
        prev = c
    return total


class TestParameterCounts:
    def test_shared_default(self, shared):
        assert count_params(shared) == 224 + 1168 + 4640 + 18496 == 24_528

    def test_individual_default(self, individual):
        assert count_params(individual) == 49_056

    @given(
        st.integers(1, 4),
        st.lists(st.integers(1, 12), min_size=1, max_size=4),
        st.sampled_from([1, 3, 5]),
    )
    @settings(max_examples=40, deadline=None)
    def test_individual_is_twice_shared(self, c_in, channels, kernel):
        size = 2 ** len(channels)
        cfgs = {m: EncoderConfig(c_in, tuple(channels), kernel, m, size) for m in ("shared", "individual")}
        counts = {m: count_params(build_encoder(c, seed=1)) for m, c in cfgs.items()}
        assert counts["individual"] == 2 * counts["shared"]
        assert counts["shared"] == _hand_count(c_in, channels, kernel)
        assert counts["shared"] == expected_encoder_params(cfgs["shared"])


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"stage_channels": ()},
            {"input_size": 24},
            {"input_size": 8},
            {"kernel": 2},
            {"sharing": "tied"},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises((ConfigError, ValueError)):
            EncoderConfig(**kwargs)

    def test_stage_shapes_halve(self):
        cfg = EncoderConfig()
        assert [cfg.stage_shape(s) for s in range(4)] == [(8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]


class TestEncode:
    def test_feature_shapes(self, shared, rng):
        x = Tensor(rng.normal(size=(2, 3, 32, 32)))
        feats_c, feats_d = encode_pair(shared, x, x)
        assert [f.shape for f in feats_c] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4), (2, 64, 2, 2)]
        assert len(feats_d) == 4

    def test_shared_is_one_function(self, shared, rng):
        x = Tensor(rng.normal(size=(3, 32, 32)))
        feats_c, feats_d = encode_pair(shared, x, x)
        assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(feats_c, feats_d))

    def test_individual_differs(self, individual, rng):
        x = Tensor(rng.normal(size=(3, 32, 32)))
        feats_c, feats_d = encode_pair(individual, x, x)
        assert not np.allclose(feats_c[0].data, feats_d[0].data)

    def test_zero_input_gives_gelu_of_bias(self, shared):
        ws = shared.weights_for(0)
        ws.conv_b[0].data = np.linspace(-1.0, 1.0, 8)
        out = shared.pre_pool(0, Tensor(np.zeros((3, 32, 32))), 0).data
        b = ws.conv_b[0].data
        expected = b * 0.5 * (1.0 + erf(b / np.sqrt(2.0)))
        np.testing.assert_allclose(out, np.broadcast_to(expected[:, None, None], out.shape), rtol=1e-15)

    def test_same_seed_same_bytes(self):
        a = build_encoder(EncoderConfig(sharing="individual"), seed=7).parameters()
        b = build_encoder(EncoderConfig(sharing="individual"), seed=7).parameters()
        assert a.keys() == b.keys()
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)

    def test_he_scaling(self):
        enc = build_encoder(EncoderConfig(stage_channels=(64, 64), input_size=4), seed=0)
        w = enc.weights_for(0).conv_w[1].data
        assert abs(w.std() - np.sqrt(2.0 / (64 * 9))) < 0.01

    def test_shape_mismatch(self, shared):
        with pytest.raises(DimensionError):
            encode_pair(shared, Tensor(np.zeros((3, 32, 32))), Tensor(np.zeros((3, 16, 16))))
        with pytest.raises(DimensionError):
            shared.encode(Tensor(np.zeros((1, 32, 32))), 0)

    def test_tied_weights_get_both_modalities_gradients(self, rng):
        from sharedfusion import numcore as nc

        cfg = EncoderConfig(stage_channels=(2,), input_size=2)
        enc = build_encoder(cfg, seed=0)
        assert enc.cfg.sharing is Sharing.SHARED
        xc, xd = Tensor(rng.normal(size=(3, 2, 2))), Tensor(rng.normal(size=(3, 2, 2)))
        w = enc.weights_for(0).conv_w[0]

        def grad_of(loss):
            w.grad = None
            nc.backward(loss)
            return w.grad.copy()

        fc, fd = encode_pair(enc, xc, xd)
        both = grad_of(nc.sum(fc[0]) + nc.sum(fd[0]))
        only_c = grad_of(nc.sum(encode_pair(enc, xc, xd)[0][0]))
        only_d = grad_of(nc.sum(encode_pair(enc, xc, xd)[1][0]))
        np.testing.assert_allclose(both, only_c + only_d, rtol=1e-12)
