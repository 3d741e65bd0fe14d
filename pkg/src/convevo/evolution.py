"""The (1+1) evolutionary driver with probabilistic niching.

One parent at a time. Each step proposes a novel mutated child, trains it
briefly, and replaces the parent only on a strict fitness improvement. When
a child is rejected, a single coin (the genome stream again, so runs stay
seed-reproducible) decides whether to explore a short niche: a greedy chain
of up to niche_depth further mutants rooted at the rejected child, whose
best member can still replace the parent if it beats it. The budget is total
training epochs; the loop starts a step only while the budget is unspent, so
a trailing niche can overrun by at most niche_depth * epochs_per_eval.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import fitness as fitness_mod
from .checkpoint import save_checkpoint
from .data import Dataset
from .errors import CheckpointError, ConfigError, DivergedEvaluation
from .flops import flops_estimate
from .genome import (
    FILTER_CHOICES,
    KERNEL_CHOICES,
    STRIDE_CHOICES,
    BlockWeights,
    ConvBlockGene,
    Genome,
    Individual,
    WeightStore,
    canonical_hash,
    random_initial_individual,
)
from .mutation import History, RngStreams, mutate_until_novel

RUN_STATE_FORMAT_VERSION = 1

EvaluateFn = Callable[
    [Individual, Dataset | None, fitness_mod.TrainProtocol, np.random.Generator],
    tuple[float, int],
]


@dataclass
class EAConfig:
    """Everything one run needs besides the dataset itself."""

    niche_rate: float = 0.1
    niche_depth: int = 5
    epochs_per_eval: int = 4
    epoch_budget: int = 512
    filter_choices: tuple[int, ...] = FILTER_CHOICES
    kernel_choices: tuple[int, ...] = KERNEL_CHOICES
    stride_choices: tuple[int, ...] = STRIDE_CHOICES
    inheritance: bool = True
    batch_size: int = 512
    learning_rate: float = 1e-3
    checkpoint_interval: int = 128
    seed: int = 0
    num_classes: int = 10
    image_height: int = 32
    image_width: int = 32
    image_channels: int = 3
    novelty_retry_budget: int = 1000

    def violations(self) -> list[str]:
        problems = []
        if not 0.0 <= self.niche_rate <= 1.0:
            problems.append(f"niche_rate {self.niche_rate} outside [0, 1]")
        if self.niche_depth < 1:
            problems.append(f"niche_depth {self.niche_depth} must be at least 1")
        if self.epochs_per_eval < 1:
            problems.append(f"epochs_per_eval {self.epochs_per_eval} must be at least 1")
        if self.epoch_budget < self.epochs_per_eval:
            problems.append(
                f"epoch_budget {self.epoch_budget} below one evaluation "
                f"({self.epochs_per_eval} epochs)"
            )
        for name in ("filter_choices", "kernel_choices", "stride_choices"):
            values = getattr(self, name)
            if not values:
                problems.append(f"{name} is empty")
            elif list(values) != sorted(set(values)):
                problems.append(f"{name} must be strictly increasing, got {values}")
            elif any(v < 1 for v in values):
                problems.append(f"{name} must be positive, got {values}")
        if self.batch_size < 1:
            problems.append(f"batch_size {self.batch_size} must be at least 1")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate {self.learning_rate} must be positive")
        if self.checkpoint_interval < 1:
            problems.append(f"checkpoint_interval {self.checkpoint_interval} must be at least 1")
        if self.num_classes < 2:
            problems.append(f"num_classes {self.num_classes} must be at least 2")
        for name in ("image_height", "image_width", "image_channels"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be at least 1")
        if self.novelty_retry_budget < 1:
            problems.append("novelty_retry_budget must be at least 1")
        return problems

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_height, self.image_width, self.image_channels)


@dataclass
class RunRecord:
    """One evaluation as it lands in the run log."""

    eval_index: int
    cumulative_epochs: int
    mutation_kind: str  # "initial" for the seed network
    niche_depth: int | None  # None outside niches, else 1..k
    parent_fitness: float | None  # comparison threshold; None for the seed
    child_fitness: float
    accepted: bool
    block_count: int
    flops_estimate: float
    genome_digest: str


RUN_LOG_COLUMNS = (
    "eval_index",
    "cumulative_epochs",
    "mutation_kind",
    "niche_depth",
    "parent_fitness",
    "child_fitness",
    "accepted",
    "block_count",
    "flops_estimate",
    "genome_digest",
)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run_log(path: str, records: list[RunRecord]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_LOG_COLUMNS)
        for rec in records:
            row = asdict(rec)
            writer.writerow([_cell(row[col]) for col in RUN_LOG_COLUMNS])


def read_run_log(path: str) -> list[RunRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(RUN_LOG_COLUMNS):
            raise CheckpointError(f"{path}: unexpected run log columns {reader.fieldnames}")
        for row in reader:
            records.append(
                RunRecord(
                    eval_index=int(row["eval_index"]),
                    cumulative_epochs=int(row["cumulative_epochs"]),
                    mutation_kind=row["mutation_kind"],
                    niche_depth=int(row["niche_depth"]) if row["niche_depth"] else None,
                    parent_fitness=(
                        float(row["parent_fitness"]) if row["parent_fitness"] else None
                    ),
                    child_fitness=float(row["child_fitness"]),
                    accepted=row["accepted"] == "true",
                    block_count=int(row["block_count"]),
                    flops_estimate=float(row["flops_estimate"]),
                    genome_digest=row["genome_digest"],
                )
            )
    return records


@dataclass
class CheckpointRecord:
    tag: int  # cumulative epochs when taken
    individual: Individual  # deep copy, safe to hold
    path: str | None  # file written, when a checkpoint_dir was given


@dataclass
class RunState:
    """Resumable driver snapshot, taken only at main-loop boundaries."""

    seed: int
    cumulative_epochs: int
    next_id: int
    next_checkpoint_mark: int
    parent: Individual
    genome_rng_state: dict
    weight_rng_state: dict
    history_digests: list[str]
    log: list[RunRecord]
    checkpoint_tags: list[int]


@dataclass
class EAResult:
    best: Individual
    log: list[RunRecord]
    checkpoints: list[CheckpointRecord]
    state: RunState
    completed: bool


def _default_evaluate(individual, data, protocol, rng):
    """Library evaluation plus the divergence policy: blown-up runs score 0.

    A diverged evaluation still charges its full epoch count; the budget paid
    for the attempt either way.
    """
    try:
        return fitness_mod.evaluate(individual, data, protocol, rng)
    except DivergedEvaluation:
        individual.fitness = 0.0
        return 0.0, protocol.epochs


class _RunContext:
    """Mutable bookkeeping shared by the main loop and niche excursions."""

    def __init__(self, cfg, data, evaluate_fn, checkpoint_dir, streams, history):
        self.cfg = cfg
        self.data = data
        self.evaluate_fn = evaluate_fn
        self.checkpoint_dir = checkpoint_dir
        self.streams = streams
        self.history = history
        self.protocol = fitness_mod.TrainProtocol(
            epochs=cfg.epochs_per_eval,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
        )
        if data is not None and len(data.train):
            self.batches_per_epoch = -(-len(data.train) // cfg.batch_size)
        else:
            self.batches_per_epoch = 1
        self.cumulative = 0
        self.next_id = 0
        self.next_checkpoint_mark = cfg.checkpoint_interval
        self.parent: Individual | None = None
        self.log: list[RunRecord] = []
        self.checkpoints: list[CheckpointRecord] = []

    def take_id(self) -> int:
        ident = self.next_id
        self.next_id += 1
        return ident

    def evaluate(self, individual: Individual) -> float:
        """Train and score one individual, charging the budget."""
        rng = np.random.default_rng(
            np.random.SeedSequence((self.cfg.seed, individual.id))
        )
        fit, epochs = self.evaluate_fn(individual, self.data, self.protocol, rng)
        individual.fitness = float(fit)
        self.cumulative += int(epochs)
        self.history.add(canonical_hash(individual.genome))
        self._last_epochs = int(epochs)
        return float(fit)

    def record(
        self,
        individual: Individual,
        kind: str,
        niche_depth: int | None,
        parent_fitness: float | None,
        accepted: bool,
    ) -> None:
        self.log.append(
            RunRecord(
                eval_index=len(self.log),
                cumulative_epochs=self.cumulative,
                mutation_kind=kind,
                niche_depth=niche_depth,
                parent_fitness=parent_fitness,
                child_fitness=float(individual.fitness),
                accepted=accepted,
                block_count=len(individual.genome.blocks),
                flops_estimate=flops_estimate(
                    individual.genome,
                    self.cfg.image_shape,
                    epochs=self._last_epochs,
                    batches_per_epoch=self.batches_per_epoch,
                    batch_size=self.cfg.batch_size,
                ),
                genome_digest=canonical_hash(individual.genome),
            )
        )
        if self.cumulative >= self.next_checkpoint_mark:
            self.take_checkpoint()
            while self.next_checkpoint_mark <= self.cumulative:
                self.next_checkpoint_mark += self.cfg.checkpoint_interval

    def take_checkpoint(self) -> None:
        """Serialize the current parent at the current budget position."""
        tag = self.cumulative
        if self.checkpoints and self.checkpoints[-1].tag == tag:
            return
        snapshot = Individual(
            genome=self.parent.genome,
            weights=self.parent.weights.copy(),
            fitness=self.parent.fitness,
            id=self.parent.id,
            parent_id=self.parent.parent_id,
        )
        path = None
        if self.checkpoint_dir is not None:
            path = save_checkpoint(
                os.path.join(self.checkpoint_dir, f"ckpt_{tag:06d}"), snapshot, tag
            )
        self.checkpoints.append(CheckpointRecord(tag=tag, individual=snapshot, path=path))

    def snapshot_state(self) -> RunState:
        return RunState(
            seed=self.cfg.seed,
            cumulative_epochs=self.cumulative,
            next_id=self.next_id,
            next_checkpoint_mark=self.next_checkpoint_mark,
            parent=self.parent,
            genome_rng_state=self.streams.genome.bit_generator.state,
            weight_rng_state=self.streams.weights.bit_generator.state,
            history_digests=self.history.snapshot(),
            log=list(self.log),
            checkpoint_tags=[c.tag for c in self.checkpoints],
        )


def niche(ctx: _RunContext, origin: Individual) -> Individual:
    """Greedy mutation chain rooted at a rejected child; returns its best.

    Runs exactly cfg.niche_depth further evaluations. Each mutant is accepted
    into the chain on strict improvement over the current chain parent; the
    returned individual is the fittest of origin and all chain members. The
    main parent is untouched here and no further niche coins are flipped, so
    niches never nest.
    """
    chain_parent = origin
    best = origin
    for depth in range(1, ctx.cfg.niche_depth + 1):
        child, edit = mutate_until_novel(
            chain_parent, ctx.history, ctx.cfg, ctx.streams, child_id=ctx.take_id()
        )
        fit = ctx.evaluate(child)
        accepted = fit > chain_parent.fitness
        ctx.record(child, edit.kind.value, depth, chain_parent.fitness, accepted)
        if accepted:
            chain_parent = child
        if fit > best.fitness:
            best = child
    return best


def run_ea(
    cfg: EAConfig,
    data: Dataset | None,
    evaluate_fn: EvaluateFn | None = None,
    checkpoint_dir: str | None = None,
    stop_after_evaluations: int | None = None,
    resume: RunState | None = None,
) -> EAResult:
    """Run the search until the epoch budget is spent.

    data may be None only with a custom evaluate_fn (architecture-level
    tests use stub fitness functions); the flops column then assumes one
    batch per epoch. stop_after_evaluations pauses the run at the next
    main-loop boundary once the log holds that many evaluations; the
    returned state resumes it exactly (same log, same checkpoints, same
    final weights as an uninterrupted run).
    """
    problems = cfg.violations()
    if problems:
        raise ConfigError("; ".join(problems))
    if data is None and evaluate_fn is None:
        raise ConfigError("run_ea needs a dataset or an explicit evaluate_fn")
    if evaluate_fn is None:
        evaluate_fn = _default_evaluate
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    if resume is not None:
        if resume.seed != cfg.seed:
            raise ConfigError(
                f"resume state was recorded under seed {resume.seed}, config says {cfg.seed}"
            )
        streams = RngStreams.from_seed(cfg.seed)
        streams.genome.bit_generator.state = resume.genome_rng_state
        streams.weights.bit_generator.state = resume.weight_rng_state
        ctx = _RunContext(
            cfg, data, evaluate_fn, checkpoint_dir, streams, History(resume.history_digests)
        )
        ctx.cumulative = resume.cumulative_epochs
        ctx.next_id = resume.next_id
        ctx.next_checkpoint_mark = resume.next_checkpoint_mark
        ctx.parent = resume.parent
        ctx.log = list(resume.log)
    else:
        streams = RngStreams.from_seed(cfg.seed)
        ctx = _RunContext(cfg, data, evaluate_fn, checkpoint_dir, streams, History())
        seed_ind = random_initial_individual(
            cfg, streams.genome, streams.weights, ident=ctx.take_id()
        )
        ctx.evaluate(seed_ind)
        ctx.parent = seed_ind
        ctx.record(seed_ind, "initial", None, None, True)

    paused = False
    while ctx.cumulative < cfg.epoch_budget:
        if stop_after_evaluations is not None and len(ctx.log) >= stop_after_evaluations:
            paused = True
            break
        child, edit = mutate_until_novel(
            ctx.parent, ctx.history, cfg, streams, child_id=ctx.take_id()
        )
        fit = ctx.evaluate(child)
        accepted = fit > ctx.parent.fitness
        threshold = ctx.parent.fitness
        if accepted:
            ctx.parent = child
            ctx.record(child, edit.kind.value, None, threshold, True)
        else:
            ctx.record(child, edit.kind.value, None, threshold, False)
            if streams.genome.random() < cfg.niche_rate:
                best = niche(ctx, child)
                if best.fitness > ctx.parent.fitness:
                    ctx.parent = best

    if not paused and (not ctx.checkpoints or ctx.checkpoints[-1].tag != ctx.cumulative):
        ctx.take_checkpoint()
    return EAResult(
        best=ctx.parent,
        log=ctx.log,
        checkpoints=ctx.checkpoints,
        state=ctx.snapshot_state(),
        completed=not paused,
    )


def _individual_meta(ind: Individual) -> dict:
    return {
        "num_classes": ind.genome.num_classes,
        "blocks": [
            {"filters": g.filters, "kernel_size": g.kernel_size, "stride": g.stride}
            for g in ind.genome.blocks
        ],
        "fitness": ind.fitness,
        "id": ind.id,
        "parent_id": ind.parent_id,
    }


def save_run_state(path: str, state: RunState) -> str:
    """Write a RunState to one .npz file (tensors verbatim, the rest JSON)."""
    if not str(path).endswith(".npz"):
        path = f"{path}.npz"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    meta = {
        "format_version": RUN_STATE_FORMAT_VERSION,
        "kind": "run_state",
        "seed": state.seed,
        "cumulative_epochs": state.cumulative_epochs,
        "next_id": state.next_id,
        "next_checkpoint_mark": state.next_checkpoint_mark,
        "genome_rng_state": state.genome_rng_state,
        "weight_rng_state": state.weight_rng_state,
        "history_digests": state.history_digests,
        "log": [asdict(rec) for rec in state.log],
        "checkpoint_tags": state.checkpoint_tags,
        "parent": _individual_meta(state.parent),
    }
    arrays = {}
    for i, blk in enumerate(state.parent.weights.blocks):
        arrays[f"block{i}_kernel"] = blk.kernel
        arrays[f"block{i}_gamma"] = blk.gamma
        arrays[f"block{i}_beta"] = blk.beta
        arrays[f"block{i}_run_mean"] = blk.run_mean
        arrays[f"block{i}_run_var"] = blk.run_var
    arrays["head_w"] = state.parent.weights.head_w
    arrays["head_b"] = state.parent.weights.head_b
    np.savez(path, state_json=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_run_state(path: str) -> RunState:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: cannot read archive: {exc}") from exc
    with archive:
        if "state_json" not in archive:
            raise CheckpointError(f"{path}: no state entry; not a run-state file")
        meta = json.loads(str(archive["state_json"]))
        if meta.get("format_version") != RUN_STATE_FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {meta.get('format_version')!r}, this build "
                f"reads {RUN_STATE_FORMAT_VERSION} only"
            )
        if meta.get("kind") != "run_state":
            raise CheckpointError(f"{path}: holds {meta.get('kind')!r}, not a run state")
        pmeta = meta["parent"]
        genome = Genome(
            blocks=tuple(
                ConvBlockGene(b["filters"], b["kernel_size"], b["stride"])
                for b in pmeta["blocks"]
            ),
            num_classes=pmeta["num_classes"],
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
            store = WeightStore(
                blocks=blocks, head_w=archive["head_w"], head_b=archive["head_b"]
            )
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing tensor {exc}") from exc
    parent = Individual(
        genome=genome,
        weights=store,
        fitness=pmeta["fitness"],
        id=pmeta["id"],
        parent_id=pmeta["parent_id"],
    )
    log = [
        RunRecord(
            eval_index=rec["eval_index"],
            cumulative_epochs=rec["cumulative_epochs"],
            mutation_kind=rec["mutation_kind"],
            niche_depth=rec["niche_depth"],
            parent_fitness=rec["parent_fitness"],
            child_fitness=rec["child_fitness"],
            accepted=rec["accepted"],
            block_count=rec["block_count"],
            flops_estimate=rec["flops_estimate"],
            genome_digest=rec["genome_digest"],
        )
        for rec in meta["log"]
    ]
    return RunState(
        seed=meta["seed"],
        cumulative_epochs=meta["cumulative_epochs"],
        next_id=meta["next_id"],
        next_checkpoint_mark=meta["next_checkpoint_mark"],
        parent=parent,
        genome_rng_state=meta["genome_rng_state"],
        weight_rng_state=meta["weight_rng_state"],
        history_digests=meta["history_digests"],
        log=log,
        checkpoint_tags=meta["checkpoint_tags"],
    )
