"""Analytic FLOP accounting for the searched architectures.

Counting convention: a multiply-add is 2 FLOPs. Per example, a conv block
costs 2*k*k*Cin*F*Hout*Wout for the convolution, 2*Hout*Wout*F for the batch
norm scale and shift, and Hout*Wout*F for the ReLU; pooling costs one add
per element and the head costs 2*Cin*classes. Backward work is not modeled;
training cost scales the forward count by examples seen.
"""

from __future__ import annotations

from .genome import Genome


def per_example_forward_flops(genome: Genome, image_shape: tuple[int, int, int]) -> float:
    """Forward FLOPs for one example of the given [H, W, C] input shape."""
    h, w, cin = image_shape
    total = 0.0
    for gene in genome.blocks:
        ho = -(-h // gene.stride)
        wo = -(-w // gene.stride)
        k = gene.kernel_size
        total += 2.0 * k * k * cin * gene.filters * ho * wo  # conv multiply-adds
        total += 2.0 * ho * wo * gene.filters  # batch norm scale and shift
        total += 1.0 * ho * wo * gene.filters  # relu
        h, w, cin = ho, wo, gene.filters
    total += 1.0 * h * w * cin  # global average pool adds
    total += 2.0 * cin * genome.num_classes  # dense head
    return total


def flops_estimate(
    genome: Genome,
    image_shape: tuple[int, int, int],
    epochs: int,
    batches_per_epoch: int,
    batch_size: int,
) -> float:
    """Training-cost estimate: per-example forward cost times examples seen.

    batches_per_epoch is explicit rather than derived so callers can match
    whatever accounting they need; the driver passes
    ceil(train_size / batch_size).
    """
    per_example = per_example_forward_flops(genome, image_shape)
    return per_example * epochs * batches_per_epoch * batch_size
