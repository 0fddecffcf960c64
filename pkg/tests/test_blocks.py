import numpy as np
import pytest

from rapidnet.blocks import (
    DilatedConvBlock,
    DownsampleBlock,
    HeadBlock,
    InvertedResidualBlock,
    LkFfnBlock,
    MldcBlock,
    StemBlock,
    dcb_forward,
    downsample_forward,
    head_forward,
    irb_forward,
    lkffn_forward,
    mldc_forward,
    stem_forward,
)
from rapidnet.errors import GeometryError, ShapeError


class TestStem:
    def test_quarter_resolution_ti_width(self, rng):
        stem = StemBlock(3, 32, rng=rng)
        out = stem_forward(rng.normal((1, 3, 224, 224)), stem)
        assert out.shape == (1, 32, 56, 56)

    def test_minimum_size(self, rng):
        stem = StemBlock(3, 8, rng=rng)
        assert stem_forward(rng.normal((1, 3, 4, 4)), stem).shape == (1, 8, 1, 1)

    def test_indivisible_resolution(self, rng):
        stem = StemBlock(3, 8, rng=rng)
        with pytest.raises(GeometryError):
            stem_forward(rng.normal((1, 3, 226, 224)), stem)


class TestInvertedResidual:
    def test_zero_weights_is_identity(self, rng):
        block = InvertedResidualBlock(4)  # zero-initialized convs, identity BN stats
        x = rng.normal((2, 4, 6, 6))
        assert np.allclose(irb_forward(x, block), x)

    def test_shape_preserved_stage3_width(self, rng):
        block = InvertedResidualBlock(112, rng=rng)
        x = rng.normal((1, 112, 14, 14))
        assert irb_forward(x, block).shape == (1, 112, 14, 14)

    def test_channel_mismatch(self, rng):
        block = InvertedResidualBlock(4, rng=rng)
        with pytest.raises(ShapeError):
            irb_forward(rng.normal((1, 5, 6, 6)), block)


class TestMldc:
    def test_zero_weights_is_identity(self, rng):
        block = MldcBlock(4)
        x = rng.normal((1, 4, 9, 9))
        # cpe weights are zero and the skip carries x through; pw convs are
        # zero so the outer residual dominates
        assert np.allclose(block.forward(x), x)

    def test_shape_preserved_stage4_width(self, rng):
        block = MldcBlock(224, rng=rng)
        x = rng.normal((1, 224, 7, 7))
        assert mldc_forward(x, block, "train").shape == (1, 224, 7, 7)

    def test_small_inputs_permitted(self, rng):
        block = MldcBlock(4, rng=rng)
        assert block.forward(rng.normal((1, 4, 2, 2))).shape == (1, 4, 2, 2)

    def test_branch_symmetry(self, rng):
        # swapping both branch weights and their dilations leaves the sum unchanged
        block = MldcBlock(4, rng=rng)
        x = rng.normal((1, 4, 8, 8))
        out = block.forward(x)
        a, b = block.branches
        bn_a, bn_b = block.branch_bns
        block.branches = [b, a]
        block.branch_bns = [bn_b, bn_a]
        assert np.allclose(block.forward(x), out)

    def test_mode_argument_validated(self, rng):
        block = MldcBlock(4, rng=rng)
        with pytest.raises(ValueError):
            mldc_forward(rng.normal((1, 4, 4, 4)), block, "inference")

    def test_branch_counts_per_mode(self, rng):
        assert len(MldcBlock(4, mixer_mode="mldc", rng=rng).branches) == 2
        assert len(MldcBlock(4, mixer_mode="sldc", rng=rng).branches) == 1
        assert len(MldcBlock(4, mixer_mode="conv3x3", rng=rng).branches) == 1
        assert len(MldcBlock(4, mixer_mode="pointwise", rng=rng).branches) == 1

    def test_dilations_and_kernels(self, rng):
        block = MldcBlock(4, dilations=(3, 4), kernel=5, rng=rng)
        assert [c.dilation for c in block.branches] == [3, 4]
        assert [c.kernel_size for c in block.branches] == [5, 5]
        assert [c.padding for c in block.branches] == [6, 8]
        x = rng.normal((1, 4, 10, 10))
        assert block.forward(x).shape == x.shape


class TestLkFfn:
    def test_zero_weights_is_identity(self, rng):
        block = LkFfnBlock(4)
        x = rng.normal((1, 4, 8, 8))
        assert np.allclose(lkffn_forward(x, block), x)

    def test_shape_preserved_m_stage3(self, rng):
        block = LkFfnBlock(160, rng=rng)
        x = rng.normal((2, 160, 14, 14))
        assert lkffn_forward(x, block).shape == (2, 160, 14, 14)

    def test_small_kernel_flag(self, rng):
        block = LkFfnBlock(4, large_kernel=False, rng=rng)
        assert block.dw.kernel_size == 1
        x = rng.normal((1, 4, 6, 6))
        assert block.forward(x).shape == x.shape


class TestComposites:
    def test_dcb_shape(self, rng):
        dcb = DilatedConvBlock(MldcBlock(112, rng=rng), LkFfnBlock(112, rng=rng))
        x = rng.normal((1, 112, 14, 14))
        assert dcb_forward(x, dcb).shape == (1, 112, 14, 14)

    def test_downsample_ti_stage3_to_4(self, rng):
        block = DownsampleBlock(112, 224, rng=rng)
        x = rng.normal((1, 112, 14, 14))
        assert downsample_forward(x, block).shape == (1, 224, 7, 7)

    def test_head_shape(self, rng):
        head = HeadBlock(224, 1000, rng=rng)
        x = rng.normal((1, 224, 7, 7))
        assert head_forward(x, head).shape == (1, 1000)

    def test_head_hidden_shape(self, rng):
        head = HeadBlock(224, 1000, hidden=1280, rng=rng)
        x = rng.normal((2, 224, 7, 7))
        assert head_forward(x, head).shape == (2, 1000)


class TestResidualPassthrough:
    # any residual block with zero non-skip weights and identity BN stats is identity
    @pytest.mark.parametrize("factory", [
        lambda: InvertedResidualBlock(4),
        lambda: MldcBlock(4),
        lambda: MldcBlock(4, mixer_mode="sldc"),
        lambda: MldcBlock(4, use_cpe=False),
        lambda: LkFfnBlock(4),
    ])
    def test_identity(self, factory, rng):
        block = factory()
        x = rng.normal((1, 4, 8, 8))
        assert np.allclose(block.forward(x), x, atol=1e-6)
