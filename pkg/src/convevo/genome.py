"""Genome types for the searched architectures and their weight stores.

An architecture is a sequence of conv blocks (conv -> batch norm -> ReLU),
global average pooling, and a dense softmax head. The genome records the
per-block hyperparameters only; the paired WeightStore holds the tensors,
including the batch norm running statistics, so a trained individual can be
copied, mutated, and serialized without retraining from scratch.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import engine
from .errors import ShapeError, StoreError

if TYPE_CHECKING:  # pragma: no cover - annotation only
    from .evolution import EAConfig

FILTER_CHOICES = (16, 32, 64, 96, 128, 192, 256)
KERNEL_CHOICES = (1, 3, 5)
STRIDE_CHOICES = (1, 2)
MAX_STRIDE_TWO_BLOCKS = 3

_DIGEST_TAG = "convnet-genome/1"


@dataclass(frozen=True)
class ConvBlockGene:
    """Hyperparameters of one conv block: conv -> batch norm -> ReLU."""

    filters: int
    kernel_size: int
    stride: int


@dataclass(frozen=True)
class Genome:
    blocks: tuple[ConvBlockGene, ...]
    num_classes: int

    def __len__(self) -> int:
        return len(self.blocks)


def canonical_hash(genome: Genome) -> str:
    """Stable hex digest of the architecture; equal genomes hash equally."""
    parts = [_DIGEST_TAG, f"classes={genome.num_classes}"]
    parts += [f"{g.filters},{g.kernel_size},{g.stride}" for g in genome.blocks]
    return hashlib.sha256("|".join(parts).encode("ascii")).hexdigest()


def validate(genome: Genome, cfg: "EAConfig") -> list[str]:
    """Check a genome against the search-space sets; return violation strings.

    An empty list means the genome is valid. Checked: at least one block,
    every gene value drawn from the configured choice sets, and at most
    MAX_STRIDE_TWO_BLOCKS blocks of stride two.
    """
    violations = []
    if not genome.blocks:
        violations.append("genome has no blocks")
    for i, gene in enumerate(genome.blocks):
        if gene.filters not in cfg.filter_choices:
            violations.append(f"block {i}: filters {gene.filters} not in {cfg.filter_choices}")
        if gene.kernel_size not in cfg.kernel_choices:
            violations.append(
                f"block {i}: kernel size {gene.kernel_size} not in {cfg.kernel_choices}"
            )
        if gene.stride not in cfg.stride_choices:
            violations.append(f"block {i}: stride {gene.stride} not in {cfg.stride_choices}")
    stride_two = sum(1 for g in genome.blocks if g.stride == 2)
    if stride_two > MAX_STRIDE_TWO_BLOCKS:
        violations.append(
            f"{stride_two} stride-2 blocks exceed the limit of {MAX_STRIDE_TWO_BLOCKS}"
        )
    stride_product = 1
    for gene in genome.blocks:
        stride_product *= gene.stride
    if stride_product > min(cfg.image_height, cfg.image_width):
        violations.append(
            f"stride product {stride_product} would shrink a "
            f"{cfg.image_height}x{cfg.image_width} input below one pixel"
        )
    if genome.num_classes < 2:
        violations.append(f"num_classes must be at least 2, got {genome.num_classes}")
    return violations


@dataclass
class BlockWeights:
    """Tensors of one conv block, batch norm running statistics included."""

    kernel: np.ndarray  # [k, k, Cin, F]
    gamma: np.ndarray  # [F]
    beta: np.ndarray  # [F]
    run_mean: np.ndarray  # [F]
    run_var: np.ndarray  # [F]

    def copy(self) -> "BlockWeights":
        return BlockWeights(
            kernel=self.kernel.copy(),
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            run_mean=self.run_mean.copy(),
            run_var=self.run_var.copy(),
        )


@dataclass
class WeightStore:
    """All tensors of one individual, ordered to match its genome."""

    blocks: list[BlockWeights]
    head_w: np.ndarray  # [F_last, num_classes]
    head_b: np.ndarray  # [num_classes]

    def copy(self) -> "WeightStore":
        return WeightStore(
            blocks=[b.copy() for b in self.blocks],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )

    @property
    def in_channels(self) -> int:
        if not self.blocks:
            raise StoreError("weight store has no blocks")
        return int(self.blocks[0].kernel.shape[2])

    def trainables(self) -> list[tuple[str, np.ndarray]]:
        """Named trainable tensors in a fixed order (running stats excluded)."""
        named = []
        for i, blk in enumerate(self.blocks):
            named.append((f"block{i}.kernel", blk.kernel))
            named.append((f"block{i}.gamma", blk.gamma))
            named.append((f"block{i}.beta", blk.beta))
        named.append(("head.w", self.head_w))
        named.append(("head.b", self.head_b))
        return named


def fresh_block_weights(
    gene: ConvBlockGene,
    in_channels: int,
    rng: np.random.Generator,
    dtype=engine.DEFAULT_DTYPE,
) -> BlockWeights:
    """Glorot kernel, unit gamma, zero beta, zero/unit running stats."""
    k = gene.kernel_size
    kernel = engine.glorot_init(
        (k, k, in_channels, gene.filters),
        fan_in=k * k * in_channels,
        fan_out=k * k * gene.filters,
        rng=rng,
        dtype=dtype,
    )
    f = gene.filters
    return BlockWeights(
        kernel=kernel,
        gamma=np.ones(f, dtype=dtype),
        beta=np.zeros(f, dtype=dtype),
        run_mean=np.zeros(f, dtype=dtype),
        run_var=np.ones(f, dtype=dtype),
    )


def fresh_head_weights(
    in_features: int,
    num_classes: int,
    rng: np.random.Generator,
    dtype=engine.DEFAULT_DTYPE,
) -> tuple[np.ndarray, np.ndarray]:
    w = engine.glorot_init(
        (in_features, num_classes),
        fan_in=in_features,
        fan_out=num_classes,
        rng=rng,
        dtype=dtype,
    )
    return w, np.zeros(num_classes, dtype=dtype)


def fresh_weights(
    genome: Genome,
    in_channels: int,
    rng: np.random.Generator,
    dtype=engine.DEFAULT_DTYPE,
) -> WeightStore:
    """Initialize every tensor of a genome from scratch, block order fixed."""
    blocks = []
    cin = in_channels
    for gene in genome.blocks:
        blocks.append(fresh_block_weights(gene, cin, rng, dtype))
        cin = gene.filters
    head_w, head_b = fresh_head_weights(cin, genome.num_classes, rng, dtype)
    return WeightStore(blocks=blocks, head_w=head_w, head_b=head_b)


def check_store(genome: Genome, store: WeightStore, in_channels: int) -> list[str]:
    """Shape-check every tensor against the genome; return violation strings."""
    violations = []
    if len(store.blocks) != len(genome.blocks):
        return [
            f"store has {len(store.blocks)} blocks but genome has {len(genome.blocks)}"
        ]
    cin = in_channels
    for i, (gene, blk) in enumerate(zip(genome.blocks, store.blocks)):
        k = gene.kernel_size
        want = (k, k, cin, gene.filters)
        if blk.kernel.shape != want:
            violations.append(f"block {i}: kernel shape {blk.kernel.shape}, want {want}")
        for name in ("gamma", "beta", "run_mean", "run_var"):
            arr = getattr(blk, name)
            if arr.shape != (gene.filters,):
                violations.append(
                    f"block {i}: {name} shape {arr.shape}, want ({gene.filters},)"
                )
        cin = gene.filters
    if store.head_w.shape != (cin, genome.num_classes):
        violations.append(
            f"head weight shape {store.head_w.shape}, want {(cin, genome.num_classes)}"
        )
    if store.head_b.shape != (genome.num_classes,):
        violations.append(
            f"head bias shape {store.head_b.shape}, want ({genome.num_classes},)"
        )
    return violations


@dataclass
class Individual:
    """A genome paired with its (possibly trained) weights."""

    genome: Genome
    weights: WeightStore
    fitness: float | None = None
    id: int = 0
    parent_id: int | None = None


def random_initial_individual(
    cfg: "EAConfig",
    genome_rng: np.random.Generator,
    weight_rng: np.random.Generator,
    ident: int = 0,
) -> Individual:
    """Single-block starting point: uniform filters and kernel size, stride 1.

    Architecture draws come from genome_rng, tensor draws from weight_rng, so
    runs that differ only in weight handling still walk the same genome
    sequence under a shared seed.
    """
    f = int(cfg.filter_choices[genome_rng.integers(len(cfg.filter_choices))])
    k = int(cfg.kernel_choices[genome_rng.integers(len(cfg.kernel_choices))])
    genome = Genome(
        blocks=(ConvBlockGene(filters=f, kernel_size=k, stride=1),),
        num_classes=cfg.num_classes,
    )
    weights = fresh_weights(genome, cfg.image_channels, weight_rng)
    return Individual(genome=genome, weights=weights, id=ident, parent_id=None)


def _check_ready(individual: Individual, batch: np.ndarray) -> None:
    if batch.ndim != 4:
        raise ShapeError(f"batch must be NHWC, got shape {batch.shape}")
    violations = check_store(individual.genome, individual.weights, batch.shape[3])
    if violations:
        raise StoreError("; ".join(violations))


def forward(individual: Individual, batch: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Run the network on an NHWC batch and return [N, num_classes] logits.

    mode "train" uses batch statistics in every batch norm and updates the
    running estimates in place; "infer" uses the stored running estimates.
    """
    _check_ready(individual, batch)
    x = batch
    for gene, blk in zip(individual.genome.blocks, individual.weights.blocks):
        x = engine.conv2d(x, blk.kernel, gene.stride)
        x = engine.batchnorm(x, blk.gamma, blk.beta, blk.run_mean, blk.run_var, mode)
        x = engine.relu(x)
    pooled = engine.gap(x)
    return engine.dense(pooled, individual.weights.head_w, individual.weights.head_b)


def loss_and_gradients(
    individual: Individual, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Train-mode loss and gradients for every trainable tensor.

    The gradient list is ordered to match WeightStore.trainables(). Batch
    norm running statistics are updated in place as a side effect, exactly as
    one training step would.
    """
    _check_ready(individual, batch)
    store = individual.weights
    conv_in: list[np.ndarray] = []
    bn_in: list[np.ndarray] = []
    relu_in: list[np.ndarray] = []
    x = batch
    for gene, blk in zip(individual.genome.blocks, store.blocks):
        conv_in.append(x)
        x = engine.conv2d(x, blk.kernel, gene.stride)
        bn_in.append(x)
        x = engine.batchnorm(x, blk.gamma, blk.beta, blk.run_mean, blk.run_var, "train")
        relu_in.append(x)
        x = engine.relu(x)
    pooled_in = x
    pooled = engine.gap(x)
    logits = engine.dense(pooled, store.head_w, store.head_b)
    loss, dlogits = engine.softmax_xent(logits, labels)

    dpooled, dhead_w, dhead_b = engine.dense_grad(dlogits, pooled, store.head_w)
    dx = engine.gap_grad(dpooled, pooled_in.shape)
    per_block: list[list[np.ndarray]] = []
    for i in range(len(store.blocks) - 1, -1, -1):
        gene = individual.genome.blocks[i]
        blk = store.blocks[i]
        dx = engine.relu_grad(dx, relu_in[i])
        dx, dgamma, dbeta = engine.batchnorm_grad(dx, bn_in[i], blk.gamma)
        dx, dkernel = engine.conv2d_grad(dx, conv_in[i], blk.kernel, gene.stride)
        per_block.append([dkernel, dgamma, dbeta])
    grads: list[np.ndarray] = []
    for triple in reversed(per_block):
        grads.extend(triple)
    grads.append(dhead_w)
    grads.append(dhead_b)
    return loss, grads
