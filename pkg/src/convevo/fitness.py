"""Fitness evaluation: short training bursts and full fine-tuning.

evaluate() is the inner loop of the search: e epochs of minibatch Adam on
the training split, scored by validation accuracy. Training happens in place
on the individual's tensors, so an accepted child carries its learned
weights into later mutations. Optimizer state is always fresh; it never
travels across evaluations or mutations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data import Dataset, Split
from .engine import AdamState, adam_step
from .errors import DivergedEvaluation, SplitSizeError, StoreError
from .genome import Individual, check_store, forward, loss_and_gradients


@dataclass(frozen=True)
class TrainProtocol:
    """One evaluation's training recipe."""

    epochs: int
    batch_size: int = 512
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class FinetuneSchedule:
    """Piecewise-constant learning rate over a fixed epoch count.

    stages are (last_epoch, rate) pairs with 1-based inclusive epoch bounds:
    the default runs 30 epochs at 1e-3 / 1e-4 / 1e-5 for epochs 1-10 / 11-20
    / 21-30.
    """

    stages: tuple[tuple[int, float], ...] = ((10, 1e-3), (20, 1e-4), (30, 1e-5))
    batch_size: int = 512

    @property
    def total_epochs(self) -> int:
        return self.stages[-1][0]

    def rate_for_epoch(self, epoch: int) -> float:
        if epoch < 1 or epoch > self.total_epochs:
            raise ValueError(f"epoch {epoch} outside 1..{self.total_epochs}")
        for last, rate in self.stages:
            if epoch <= last:
                return rate
        raise AssertionError("unreachable")  # pragma: no cover


def shuffle_and_batch(
    data: Split, batch_size: int, rng: np.random.Generator
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield one epoch of minibatches over a fresh shuffle.

    Every example appears exactly once; the last batch is short when
    batch_size does not divide the split, and a batch_size at or above the
    split size yields a single full-split batch.
    """
    if batch_size < 1:
        raise SplitSizeError(f"batch size must be positive, got {batch_size}")
    n = len(data)
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        idx = perm[lo:lo + batch_size]
        yield data.images[idx], data.labels[idx]


def _check_consistent(individual: Individual, in_channels: int) -> None:
    violations = check_store(individual.genome, individual.weights, in_channels)
    if violations:
        raise StoreError("; ".join(violations))


def predictions(individual: Individual, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Inference-mode argmax class per example, evaluated in chunks.

    Ties resolve to the lowest class index. Raises DivergedEvaluation if any
    logit comes out non-finite (a blown-up network is a failed evaluation,
    not a random guess).
    """
    out = np.empty(len(images), dtype=np.int64)
    for lo in range(0, len(images), batch_size):
        logits = forward(individual, images[lo:lo + batch_size], mode="infer")
        if not np.all(np.isfinite(logits)):
            raise DivergedEvaluation("non-finite logits at scoring time")
        out[lo:lo + batch_size] = np.argmax(logits, axis=1)
    return out


def classification_accuracy(
    individual: Individual, data: Split, batch_size: int = 512
) -> float:
    if len(data) == 0:
        raise SplitSizeError("cannot score an empty split")
    return float(np.mean(predictions(individual, data.images, batch_size) == data.labels))


def _train_epochs(
    individual: Individual,
    train: Split,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    state: AdamState,
    rate_for_epoch=None,
) -> None:
    params = [arr for _, arr in individual.weights.trainables()]
    for epoch in range(1, epochs + 1):
        if rate_for_epoch is not None:
            state.lr = rate_for_epoch(epoch)
        for xb, yb in shuffle_and_batch(train, batch_size, rng):
            loss, grads = loss_and_gradients(individual, xb, yb)
            if not np.isfinite(loss):
                raise DivergedEvaluation(f"non-finite training loss {loss}")
            adam_step(params, grads, state)


def evaluate(
    individual: Individual,
    data: Dataset,
    protocol: TrainProtocol,
    rng: np.random.Generator,
) -> tuple[float, int]:
    """Train for protocol.epochs and score validation accuracy.

    Mutates the individual's weights in place and records the score on
    individual.fitness. Returns (fitness, epochs charged). protocol.epochs
    may be 0, which scores the untouched weights. Raises DivergedEvaluation
    on a non-finite loss; the caller decides what fitness that earns.
    """
    if len(data.train) == 0:
        raise SplitSizeError("training split is empty")
    _check_consistent(individual, data.train.images.shape[3])
    if protocol.epochs:
        params = [arr for _, arr in individual.weights.trainables()]
        state = AdamState.for_params(params, lr=protocol.learning_rate)
        _train_epochs(
            individual, data.train, protocol.epochs, protocol.batch_size, rng, state
        )
    fitness = classification_accuracy(individual, data.val, protocol.batch_size)
    individual.fitness = fitness
    return fitness, protocol.epochs


def train_to_completion(
    individual: Individual,
    data: Dataset,
    schedule: FinetuneSchedule,
    rng: np.random.Generator,
) -> float:
    """Fine-tune under the staged learning rates and return test accuracy.

    One Adam state persists across the whole schedule; only its learning rate
    changes at stage boundaries. This is the only code path that reads the
    test split. individual.fitness (a validation number) is left alone.
    """
    if len(data.train) == 0:
        raise SplitSizeError("training split is empty")
    _check_consistent(individual, data.train.images.shape[3])
    params = [arr for _, arr in individual.weights.trainables()]
    state = AdamState.for_params(params, lr=schedule.rate_for_epoch(1))
    _train_epochs(
        individual,
        data.train,
        schedule.total_epochs,
        schedule.batch_size,
        rng,
        state,
        rate_for_epoch=schedule.rate_for_epoch,
    )
    return classification_accuracy(individual, data.test, schedule.batch_size)
