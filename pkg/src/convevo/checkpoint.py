"""Checkpoint serialization: one individual plus its budget position.

Files are .npz archives holding every tensor verbatim (so round trips are
bit-exact) and a single JSON metadata entry for everything scalar. The format
is versioned and loads refuse any other version rather than guessing.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from .errors import CheckpointError
from .genome import BlockWeights, ConvBlockGene, Genome, Individual, WeightStore

CHECKPOINT_FORMAT_VERSION = 1
_META_KEY = "meta_json"


def _meta(individual: Individual, cumulative_epochs: int) -> dict[str, Any]:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "individual",
        "num_classes": individual.genome.num_classes,
        "blocks": [
            {"filters": g.filters, "kernel_size": g.kernel_size, "stride": g.stride}
            for g in individual.genome.blocks
        ],
        "fitness": individual.fitness,
        "id": individual.id,
        "parent_id": individual.parent_id,
        "cumulative_epochs": int(cumulative_epochs),
    }


def _arrays(store: WeightStore) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for i, blk in enumerate(store.blocks):
        arrays[f"block{i}_kernel"] = blk.kernel
        arrays[f"block{i}_gamma"] = blk.gamma
        arrays[f"block{i}_beta"] = blk.beta
        arrays[f"block{i}_run_mean"] = blk.run_mean
        arrays[f"block{i}_run_var"] = blk.run_var
    arrays["head_w"] = store.head_w
    arrays["head_b"] = store.head_b
    return arrays


def save_checkpoint(path: str, individual: Individual, cumulative_epochs: int) -> str:
    """Write one individual; returns the path actually written (.npz forced)."""
    if not str(path).endswith(".npz"):
        path = f"{path}.npz"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    meta = json.dumps(_meta(individual, cumulative_epochs), sort_keys=True)
    np.savez(path, **{_META_KEY: np.array(meta)}, **_arrays(individual.weights))
    return path


def _load_meta(archive, path: str) -> dict[str, Any]:
    if _META_KEY not in archive:
        raise CheckpointError(f"{path}: no metadata entry; not a checkpoint file")
    try:
        meta = json.loads(str(archive[_META_KEY]))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version!r}, this build reads "
            f"{CHECKPOINT_FORMAT_VERSION} only"
        )
    return meta


def load_checkpoint(path: str) -> tuple[Individual, int]:
    """Load an individual and its cumulative epoch tag, verifying shapes."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: cannot read archive: {exc}") from exc
    with archive:
        meta = _load_meta(archive, path)
        if meta.get("kind") != "individual":
            raise CheckpointError(f"{path}: holds {meta.get('kind')!r}, not an individual")
        genome = Genome(
            blocks=tuple(
                ConvBlockGene(b["filters"], b["kernel_size"], b["stride"])
                for b in meta["blocks"]
            ),
            num_classes=meta["num_classes"],
        )
        try:
            blocks = [
                BlockWeights(
                    kernel=archive[f"block{i}_kernel"],
                    gamma=archive[f"block{i}_gamma"],
                    beta=archive[f"block{i}_beta"],
                    run_mean=archive[f"block{i}_run_mean"],
                    run_var=archive[f"block{i}_run_var"],
                )
                for i in range(len(genome.blocks))
            ]
            store = WeightStore(blocks=blocks, head_w=archive["head_w"], head_b=archive["head_b"])
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing tensor {exc}") from exc
    individual = Individual(
        genome=genome,
        weights=store,
        fitness=meta["fitness"],
        id=meta["id"],
        parent_id=meta["parent_id"],
    )
    return individual, int(meta["cumulative_epochs"])
