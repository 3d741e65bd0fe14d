"""Mutation operators, weight inheritance, and novelty-forced sampling.

Two rng streams are threaded through everything here. The genome stream
drives every architecture-affecting draw (operator kind, position, new gene
values, and the niche coin in the driver); the weight stream drives tensor
initialization only. Runs that differ in weight handling (inheritance on vs
off) therefore see identical genome sequences under a shared seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .errors import EditError, InapplicableMutation, SearchExhausted
from .genome import (
    BlockWeights,
    ConvBlockGene,
    Genome,
    Individual,
    WeightStore,
    canonical_hash,
    fresh_block_weights,
    fresh_head_weights,
    fresh_weights,
    validate,
)

if TYPE_CHECKING:  # pragma: no cover - annotation only
    from .evolution import EAConfig


class MutationKind(str, Enum):
    ADD_BLOCK = "add_block"
    REMOVE_BLOCK = "remove_block"
    ADD_FILTERS = "add_filters"
    REMOVE_FILTERS = "remove_filters"
    CHANGE_KERNEL_SIZE = "change_kernel_size"
    CHANGE_STRIDE = "change_stride"


#: Relative draw frequencies; probabilities are these over their sum (13).
MUTATION_FREQUENCIES: dict[MutationKind, int] = {
    MutationKind.ADD_BLOCK: 3,
    MutationKind.REMOVE_BLOCK: 3,
    MutationKind.ADD_FILTERS: 2,
    MutationKind.REMOVE_FILTERS: 2,
    MutationKind.CHANGE_KERNEL_SIZE: 2,
    MutationKind.CHANGE_STRIDE: 1,
}

_KINDS = tuple(MUTATION_FREQUENCIES)
_PROBS = np.array([MUTATION_FREQUENCIES[k] for k in _KINDS], dtype=np.float64)
_PROBS /= _PROBS.sum()


@dataclass
class RngStreams:
    """The two seeded streams: genome-affecting draws vs weight draws."""

    genome: np.random.Generator
    weights: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "RngStreams":
        g, w = np.random.SeedSequence(seed).spawn(2)
        return cls(genome=np.random.default_rng(g), weights=np.random.default_rng(w))


@dataclass(frozen=True)
class MutationEdit:
    """Where a mutation touched the genome.

    index is the insertion slot for ADD_BLOCK (0..len) and the mutated block
    index for every other kind.
    """

    kind: MutationKind
    index: int


class History:
    """Append-only set of architecture digests seen in one run."""

    def __init__(self, digests: Iterable[str] = ()) -> None:
        self._digests: set[str] = set(digests)

    def add(self, digest: str) -> None:
        self._digests.add(digest)

    def __contains__(self, digest: str) -> bool:
        return digest in self._digests

    def __len__(self) -> int:
        return len(self._digests)

    def snapshot(self) -> list[str]:
        return sorted(self._digests)


def sample_mutation(rng: np.random.Generator) -> MutationKind:
    """Draw an operator kind at the fixed 3:3:2:2:2:1 frequencies."""
    return _KINDS[int(rng.choice(len(_KINDS), p=_PROBS))]


def _choice(rng: np.random.Generator, values) -> int:
    return int(values[rng.integers(len(values))])


def apply_edit(
    genome: Genome, kind: MutationKind, cfg: "EAConfig", rng: np.random.Generator
) -> tuple[Genome, MutationEdit]:
    """Apply one operator at a random position; genome level only.

    Raises InapplicableMutation when the operator cannot act on this genome
    (removing from a single-block genome, stepping past either end of the
    filter ladder). Applicability that depends on the drawn position is
    checked after the draw, so an unlucky position also signals inapplicable
    rather than silently retargeting.
    """
    blocks = list(genome.blocks)
    n = len(blocks)
    if kind is MutationKind.ADD_BLOCK:
        pos = int(rng.integers(n + 1))
        f = _choice(rng, cfg.filter_choices)
        k = _choice(rng, cfg.kernel_choices)
        blocks.insert(pos, ConvBlockGene(filters=f, kernel_size=k, stride=1))
        edit = MutationEdit(MutationKind.ADD_BLOCK, pos)
    elif kind is MutationKind.REMOVE_BLOCK:
        if n <= 1:
            raise InapplicableMutation("cannot remove the only block")
        pos = int(rng.integers(n))
        del blocks[pos]
        edit = MutationEdit(MutationKind.REMOVE_BLOCK, pos)
    elif kind is MutationKind.ADD_FILTERS:
        pos = int(rng.integers(n))
        ladder = cfg.filter_choices
        i = ladder.index(blocks[pos].filters)
        if i + 1 >= len(ladder):
            raise InapplicableMutation(f"block {pos} already at {ladder[-1]} filters")
        blocks[pos] = ConvBlockGene(
            filters=ladder[i + 1],
            kernel_size=blocks[pos].kernel_size,
            stride=blocks[pos].stride,
        )
        edit = MutationEdit(MutationKind.ADD_FILTERS, pos)
    elif kind is MutationKind.REMOVE_FILTERS:
        pos = int(rng.integers(n))
        ladder = cfg.filter_choices
        i = ladder.index(blocks[pos].filters)
        if i == 0:
            raise InapplicableMutation(f"block {pos} already at {ladder[0]} filters")
        blocks[pos] = ConvBlockGene(
            filters=ladder[i - 1],
            kernel_size=blocks[pos].kernel_size,
            stride=blocks[pos].stride,
        )
        edit = MutationEdit(MutationKind.REMOVE_FILTERS, pos)
    elif kind is MutationKind.CHANGE_KERNEL_SIZE:
        pos = int(rng.integers(n))
        k = _choice(rng, cfg.kernel_choices)
        blocks[pos] = ConvBlockGene(
            filters=blocks[pos].filters, kernel_size=k, stride=blocks[pos].stride
        )
        edit = MutationEdit(MutationKind.CHANGE_KERNEL_SIZE, pos)
    elif kind is MutationKind.CHANGE_STRIDE:
        pos = int(rng.integers(n))
        s = _choice(rng, cfg.stride_choices)
        blocks[pos] = ConvBlockGene(
            filters=blocks[pos].filters, kernel_size=blocks[pos].kernel_size, stride=s
        )
        edit = MutationEdit(MutationKind.CHANGE_STRIDE, pos)
    else:
        raise EditError(f"unknown mutation kind {kind!r}")
    return Genome(blocks=tuple(blocks), num_classes=genome.num_classes), edit


def _alignment(parent_len: int, edit: MutationEdit, child_len: int) -> list[int | None]:
    """Map each child block index to its parent block index (None = new)."""
    if edit.kind is MutationKind.ADD_BLOCK:
        if child_len != parent_len + 1 or not (0 <= edit.index <= parent_len):
            raise EditError(f"{edit} does not connect lengths {parent_len}->{child_len}")
        return list(range(edit.index)) + [None] + list(range(edit.index, parent_len))
    if edit.kind is MutationKind.REMOVE_BLOCK:
        if child_len != parent_len - 1 or not (0 <= edit.index < parent_len):
            raise EditError(f"{edit} does not connect lengths {parent_len}->{child_len}")
        return list(range(edit.index)) + list(range(edit.index + 1, parent_len))
    if child_len != parent_len or not (0 <= edit.index < parent_len):
        raise EditError(f"{edit} does not connect lengths {parent_len}->{child_len}")
    return list(range(parent_len))


def inherit_weights(
    parent: Individual,
    child_genome: Genome,
    edit: MutationEdit,
    rng: np.random.Generator,
) -> WeightStore:
    """Child weight store copying parent tensors wherever shapes allow.

    Rules, block by block: a brand-new block is initialized fresh; the
    mutated block is reinitialized when its own tensors changed shape or
    meaning (kernel size and filter-count changes; a stride change touches
    nothing); any surviving block is copied iff its parent kernel already has
    the child's expected shape, which reinitializes exactly the block after a
    channel-count change and nothing else. The dense head follows the same
    shape rule. Batch norm running statistics travel with their block.
    """
    parent_genome = parent.genome
    align = _alignment(len(parent_genome.blocks), edit, len(child_genome.blocks))
    if child_genome.num_classes != parent_genome.num_classes:
        raise EditError("mutation must not change the class count")
    for ci, pi in enumerate(align):
        if pi is None:
            continue
        pg, cg = parent_genome.blocks[pi], child_genome.blocks[ci]
        if ci == edit.index and edit.kind is not MutationKind.ADD_BLOCK:
            continue  # the mutated block may differ from its parent gene
        if (pg.filters, pg.kernel_size) != (cg.filters, cg.kernel_size):
            raise EditError(
                f"block {ci} differs from parent block {pi} outside the edit at "
                f"index {edit.index}"
            )

    forced_fresh = set()
    if edit.kind in (
        MutationKind.CHANGE_KERNEL_SIZE,
        MutationKind.ADD_FILTERS,
        MutationKind.REMOVE_FILTERS,
    ):
        forced_fresh.add(edit.index)

    dtype = parent.weights.head_w.dtype
    cin = parent.weights.in_channels
    blocks: list[BlockWeights] = []
    for ci, gene in enumerate(child_genome.blocks):
        pi = align[ci]
        want = (gene.kernel_size, gene.kernel_size, cin, gene.filters)
        if pi is None or ci in forced_fresh:
            blocks.append(fresh_block_weights(gene, cin, rng, dtype))
        elif parent.weights.blocks[pi].kernel.shape == want:
            blocks.append(parent.weights.blocks[pi].copy())
        else:
            blocks.append(fresh_block_weights(gene, cin, rng, dtype))
        cin = gene.filters

    if parent.weights.head_w.shape == (cin, child_genome.num_classes):
        head_w = parent.weights.head_w.copy()
        head_b = parent.weights.head_b.copy()
    else:
        head_w, head_b = fresh_head_weights(cin, child_genome.num_classes, rng, dtype)
    return WeightStore(blocks=blocks, head_w=head_w, head_b=head_b)


def apply_mutation(
    kind: MutationKind,
    parent: Individual,
    cfg: "EAConfig",
    rng: np.random.Generator,
    weight_rng: np.random.Generator,
    child_id: int = 0,
    inherit: bool = True,
) -> Individual:
    """One mutation of `kind` with inheritance (or fresh weights) applied.

    Raises InapplicableMutation like apply_edit. The child never shares
    tensor memory with the parent.
    """
    child_genome, edit = apply_edit(parent.genome, kind, cfg, rng)
    if inherit:
        weights = inherit_weights(parent, child_genome, edit, weight_rng)
    else:
        weights = fresh_weights(
            child_genome, parent.weights.in_channels, weight_rng,
            dtype=parent.weights.head_w.dtype,
        )
    return Individual(
        genome=child_genome, weights=weights, id=child_id, parent_id=parent.id
    )


def mutate_until_novel(
    parent: Individual,
    history: History,
    cfg: "EAConfig",
    streams: RngStreams,
    child_id: int = 0,
) -> tuple[Individual, MutationEdit]:
    """Sample mutations until one yields a valid, never-seen architecture.

    Inapplicable operators, search-space violations (the stride-two cap), and
    digests already in history are all handled the same way: resample the
    kind and its internal draws. Weights are materialized only for the
    accepted proposal, so rejected proposals consume no weight-stream draws.
    Returns the child and the edit that produced it. Raises SearchExhausted
    after cfg.novelty_retry_budget failed proposals.
    """
    for _ in range(cfg.novelty_retry_budget):
        kind = sample_mutation(streams.genome)
        try:
            child_genome, edit = apply_edit(parent.genome, kind, cfg, streams.genome)
        except InapplicableMutation:
            continue
        if validate(child_genome, cfg):
            continue
        if canonical_hash(child_genome) in history:
            continue
        if cfg.inheritance:
            weights = inherit_weights(parent, child_genome, edit, streams.weights)
        else:
            weights = fresh_weights(
                child_genome, parent.weights.in_channels, streams.weights,
                dtype=parent.weights.head_w.dtype,
            )
        child = Individual(
            genome=child_genome, weights=weights, id=child_id, parent_id=parent.id
        )
        return child, edit
    raise SearchExhausted(
        f"no novel valid architecture within {cfg.novelty_retry_budget} proposals"
    )
