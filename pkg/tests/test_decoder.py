"""Decoder geometry, coefficient validation, and ensemble fusion semantics."""

import numpy as np
import pytest

from cetc import ops
from cetc.autodiff import GradTape, ShapeError, Tensor
from cetc.decoder import (TDB, EnsembleCoefficients, SubDecoder,
                          SubDecoderConfig, ensemble_sum)
from cetc.encoder import CEBOutput


def make_sd(sid, c_in=2, c_out=2, seed=0):
    return SubDecoder(SubDecoderConfig(sid, c_in, c_out), np.random.default_rng(seed))


class TestEnsembleCoefficients:
    def test_valid_groups(self):
        EnsembleCoefficients(0.8, 0.1, 0.1)
        EnsembleCoefficients(1.0, 0.0, 0.0)
        EnsembleCoefficients.uniform()

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError, match="sum to 1"):
            EnsembleCoefficients(0.5, 0.5, 0.5)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            EnsembleCoefficients(1.2, -0.1, -0.1)

    def test_parse_third_tokens(self):
        c = EnsembleCoefficients.parse("1/3,1/3,1/3")
        assert c.alpha == 1.0 / 3.0
        c2 = EnsembleCoefficients.parse("0.3333333333,0.3333333333,0.3333333333")
        assert c2.alpha == 1.0 / 3.0

    def test_parse_plain_decimals(self):
        c = EnsembleCoefficients.parse("0.2, 0.6, 0.2")
        assert c.as_tuple() == (0.2, 0.6, 0.2)


class TestSubDecoders:
    def test_sd3_single_stride4(self, rng):
        sd = make_sd("SD3", c_in=32, c_out=3)
        y = sd.forward(Tensor(rng.standard_normal((1, 32, 56, 56))))
        assert y.shape == (1, 3, 224, 224)

    def test_sd1_doubles(self, rng):
        sd = make_sd("SD1", c_in=16, c_out=3)
        y = sd.forward(Tensor(rng.standard_normal((1, 16, 112, 112))))
        assert y.shape == (1, 3, 224, 224)

    def test_sd2_stride4_then_stride2(self, rng):
        sd = make_sd("SD2", c_in=4, c_out=3)
        y = sd.forward(Tensor(rng.standard_normal((1, 4, 28, 28))))
        assert y.shape == (1, 3, 224, 224)
        # intermediate stage covers 28 -> 112
        mid = ops.conv_transpose2d(Tensor(rng.standard_normal((1, 4, 28, 28))),
                                   sd.tconv1.spec)
        assert mid.shape[2:] == (112, 112)

    def test_scale_mismatch_error_names_sizes(self, rng):
        sd = make_sd("SD2")
        with pytest.raises(ShapeError, match="scale mismatch"):
            sd.forward(Tensor(rng.standard_normal((1, 2, 5, 5))),
                       expected_output=224)

    def test_relative_geometry(self, rng):
        # The same stacks work at desk scale: 16/4/8 -> 32.
        for sid, side in (("SD1", 16), ("SD2", 4), ("SD3", 8)):
            y = make_sd(sid).forward(Tensor(rng.standard_normal((1, 2, side, side))))
            assert y.shape[2:] == (32, 32), sid


class TestEnsembleSum:
    def test_degenerate_reproduces_first_map_bitwise(self, rng):
        f1 = Tensor(rng.standard_normal((1, 2, 8, 8)))
        f2 = Tensor(rng.standard_normal((1, 2, 8, 8)))
        f3 = Tensor(rng.standard_normal((1, 2, 8, 8)))
        y = ensemble_sum(f1, f2, f3, EnsembleCoefficients(1.0, 0.0, 0.0))
        np.testing.assert_array_equal(y.data, f1.data)

    def test_uniform_on_equal_maps_is_identity(self, rng):
        f = Tensor(rng.standard_normal((2, 3, 4, 4)))
        y = ensemble_sum(f, f, f, EnsembleCoefficients.uniform())
        np.testing.assert_allclose(y.data, f.data, rtol=1e-12)

    def test_hand_computed_constants(self):
        ones = lambda v: Tensor(np.full((1, 1, 2, 2), float(v)))
        y = ensemble_sum(ones(1), ones(2), ones(3),
                         EnsembleCoefficients(0.2, 0.6, 0.2))
        np.testing.assert_allclose(y.data, 2.0, rtol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ensemble_sum(Tensor(rng.standard_normal((1, 2, 4, 4))),
                         Tensor(rng.standard_normal((1, 2, 4, 4))),
                         Tensor(rng.standard_normal((1, 2, 5, 5))),
                         EnsembleCoefficients.uniform())

    def test_convexity_bounds(self, rng):
        for _ in range(100):
            maps = [rng.standard_normal((1, 2, 3, 3)) for _ in range(3)]
            raw = rng.random(3)
            raw /= raw.sum()
            coeffs = EnsembleCoefficients(*raw)
            y = ensemble_sum(*(Tensor(m) for m in maps), coeffs).data
            lo = np.minimum(np.minimum(maps[0], maps[1]), maps[2])
            hi = np.maximum(np.maximum(maps[0], maps[1]), maps[2])
            eps = 1e-12 * np.abs(hi).max()
            assert np.all(y >= lo - eps) and np.all(y <= hi + eps)

    def test_linearity_in_inputs(self, rng):
        maps = [rng.standard_normal((1, 2, 3, 3)) for _ in range(3)]
        coeffs = EnsembleCoefficients(0.2, 0.2, 0.6)
        y1 = ensemble_sum(*(Tensor(2.5 * m) for m in maps), coeffs).data
        y2 = 2.5 * ensemble_sum(*(Tensor(m) for m in maps), coeffs).data
        np.testing.assert_allclose(y1, y2, rtol=1e-12)

    @pytest.mark.parametrize("alpha,expected_ratio", [(0.0, 0.0), (0.5, 1.0), (1.0, 2.0)])
    def test_gradient_routing_scales_with_alpha(self, rng, alpha, expected_ratio):
        # Fixed decoder inputs and a fixed linear loss: the gradient that
        # reaches SD1's parameters is exactly proportional to alpha.
        sd1 = make_sd("SD1", seed=11)
        f_in = Tensor(rng.standard_normal((1, 2, 8, 8)))
        others = [Tensor(rng.standard_normal((1, 2, 16, 16))) for _ in range(2)]
        cot = rng.standard_normal((1, 2, 16, 16))

        def grad_norm(a):
            sd1.zero_grad()
            rest = (1.0 - a) / 2.0
            coeffs = EnsembleCoefficients(a, rest, rest)
            with GradTape() as tape:
                y = ensemble_sum(sd1.forward(f_in), others[0], others[1], coeffs)
                tape.backward(ops.weighted_sum(y, cot))
            sq = 0.0
            for p in sd1.parameters():
                if p.grad is not None:
                    sq += float((p.grad ** 2).sum())
            return np.sqrt(sq)

        base = grad_norm(0.5)
        got = grad_norm(alpha)
        assert base > 0
        assert abs(got / base - expected_ratio) <= 1e-6


class TestTDB:
    def test_full_block_shape_contract(self, rng):
        tdb = TDB((2, 2, 2), 3, np.random.default_rng(0))
        enc = CEBOutput(
            f_se1=Tensor(rng.standard_normal((2, 2, 16, 16))),
            f_se2=Tensor(rng.standard_normal((2, 2, 4, 4))),
            f_se3=Tensor(rng.standard_normal((2, 2, 8, 8))),
        )
        for coeffs in (EnsembleCoefficients.uniform(),
                       EnsembleCoefficients(1.0, 0.0, 0.0),
                       EnsembleCoefficients(0.1, 0.1, 0.8)):
            y = tdb.forward(enc, coeffs)
            assert y.shape == (2, 3, 32, 32)

    def test_inconsistent_scales_rejected(self, rng):
        tdb = TDB((2, 2, 2), 3, np.random.default_rng(0))
        enc = CEBOutput(
            f_se1=Tensor(rng.standard_normal((1, 2, 16, 16))),
            f_se2=Tensor(rng.standard_normal((1, 2, 8, 8))),  # should be 4
            f_se3=Tensor(rng.standard_normal((1, 2, 8, 8))),
        )
        with pytest.raises(ShapeError, match="SD2"):
            tdb.forward(enc, EnsembleCoefficients.uniform())
