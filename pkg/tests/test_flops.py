import pytest

from convevo import flops
from convevo import genome as gn


def make_genome(*blocks, classes=10):
    return gn.Genome(
        blocks=tuple(gn.ConvBlockGene(f, k, s) for f, k, s in blocks),
        num_classes=classes,
    )


class TestPerExample:
    def test_single_one_by_one_conv_hand_count(self):
        # conv 2*1*1*1*16*8*8 = 2048, bn 2*64*16 = 2048, relu 64*16 = 1024,
        # gap 64*16 = 1024, head 2*16*10 = 320
        g = make_genome((16, 1, 1))
        assert flops.per_example_forward_flops(g, (8, 8, 1)) == 6464.0

    def test_two_block_strided_hand_count(self):
        # 9x9x3 input; block one (16,3,2) maps to 5x5: conv 2*9*3*16*25 = 21600,
        # bn 800, relu 400; block two (32,5,1) stays 5x5: conv 2*25*16*32*25
        # = 640000, bn 1600, relu 800; gap 800, head 2*32*4 = 256
        g = make_genome((16, 3, 2), (32, 5, 1), classes=4)
        assert flops.per_example_forward_flops(g, (9, 9, 3)) == 666256.0

    def test_strided_output_dims_round_up(self):
        # 7x7 at stride 2 gives 4x4, not 3x3: conv term 2*1*1*8*16 = 256
        narrow = flops.per_example_forward_flops(make_genome((8, 1, 2), classes=2), (7, 7, 1))
        # conv 2*8*16 = 256, bn 2*16*8 = 256, relu 128, gap 128, head 32
        assert narrow == 256.0 + 256.0 + 128.0 + 128.0 + 32.0

    def test_grows_with_each_term(self):
        base = flops.per_example_forward_flops(make_genome((16, 3, 1)), (8, 8, 1))
        wider = flops.per_example_forward_flops(make_genome((32, 3, 1)), (8, 8, 1))
        deeper = flops.per_example_forward_flops(make_genome((16, 3, 1), (16, 3, 1)), (8, 8, 1))
        assert wider > base
        assert deeper > base


class TestEstimate:
    def test_footnote_arithmetic(self):
        # the published accounting: per-example cost times 4 epochs, 98
        # batches, batch 512 lands near 2.007e11 when per-example is 1e6
        g = make_genome((16, 1, 1))
        per = flops.per_example_forward_flops(g, (8, 8, 1))
        est = flops.flops_estimate(g, (8, 8, 1), epochs=4, batches_per_epoch=98, batch_size=512)
        assert est == per * 4 * 98 * 512
        assert 1e6 * 4 * 98 * 512 == pytest.approx(2.007e11, rel=1e-3)

    def test_linear_in_batches_per_epoch(self):
        g = make_genome((32, 3, 2), (64, 3, 1))
        one = flops.flops_estimate(g, (16, 16, 3), epochs=4, batches_per_epoch=49, batch_size=512)
        two = flops.flops_estimate(g, (16, 16, 3), epochs=4, batches_per_epoch=98, batch_size=512)
        assert two == 2 * one

    def test_linear_in_epochs_and_batch_size(self):
        g = make_genome((32, 3, 1))
        base = flops.flops_estimate(g, (8, 8, 3), epochs=2, batches_per_epoch=10, batch_size=32)
        assert flops.flops_estimate(g, (8, 8, 3), epochs=4, batches_per_epoch=10, batch_size=32) == 2 * base
        assert flops.flops_estimate(g, (8, 8, 3), epochs=2, batches_per_epoch=10, batch_size=64) == 2 * base
