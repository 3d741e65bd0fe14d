"""Experiment harness: config files, repeated seeded runs, result tables.

A config file describes one comparison: a dataset, shared search settings,
and a list of arms that differ in weight handling and epochs per evaluation.
Every arm runs the same repetition seeds (base_seed + repetition index), so
cross-arm comparisons are seed-paired. Artifacts are plain CSVs plus .npz
checkpoints, laid out as out/<arm>/rep<k>/ per run with the cross-run tables
at the top level; every table recomputes exactly from the per-run files.
"""

from __future__ import annotations

import configparser
import csv
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import load_checkpoint
from .data import (
    Dataset,
    SynthSpec,
    load_cifar,
    load_cifar_test,
    load_idx,
    split,
    synth_dataset,
)
from .errors import ConfigError, ConvevoError, RunFailure
from .evolution import EAConfig, RunRecord, read_run_log, run_ea, write_run_log
from .fitness import FinetuneSchedule, train_to_completion
from .stats import mann_whitney_u_one_sided

EXPERIMENT_SCHEMA_VERSION = 1

_ARM_NAME = re.compile(r"^[A-Za-z0-9_-]+$")

_IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

_EXPERIMENT_KEYS = {
    "schema_version",
    "name",
    "dataset",
    "data_dir",
    "train_size",
    "val_size",
    "test_size",
    "num_classes",
    "image_size",
    "difficulty",
    "repetitions",
    "base_seed",
    "niche_rate",
    "niche_depth",
    "epoch_budget",
    "batch_size",
    "learning_rate",
    "checkpoint_interval",
    "filter_choices",
    "kernel_choices",
    "stride_choices",
    "finetune_checkpoints",
}

_ARM_KEYS = {"inheritance", "epochs_per_eval"}

_DATASET_KINDS = ("synth", "idx", "cifar10", "cifar100")

RUNS_COLUMNS = (
    "arm",
    "repetition",
    "seed",
    "evaluations",
    "cumulative_epochs",
    "best_val_fitness",
    "best_block_count",
    "total_flops",
)
FINETUNE_COLUMNS = ("arm", "repetition", "checkpoint", "checkpoint_epochs", "test_accuracy")
SUMMARY_COLUMNS = (
    "arm",
    "checkpoint",
    "n",
    "min_test_accuracy",
    "mean_test_accuracy",
    "std_test_accuracy",
    "max_test_accuracy",
)
FAILURES_COLUMNS = ("arm", "repetition", "stage", "error")
STATS_COLUMNS = (
    "metric",
    "checkpoint",
    "arm_a",
    "arm_b",
    "n_a",
    "n_b",
    "u_statistic",
    "p_value",
)


@dataclass(frozen=True)
class ArmSpec:
    name: str
    inheritance: bool
    epochs_per_eval: int


@dataclass
class ExperimentConfig:
    name: str
    dataset: str
    data_dir: str
    train_size: int
    val_size: int
    test_size: int
    num_classes: int
    image_size: tuple[int, int, int]
    difficulty: float
    repetitions: int
    base_seed: int
    niche_rate: float
    niche_depth: int
    epoch_budget: int
    batch_size: int
    learning_rate: float
    checkpoint_interval: int
    filter_choices: tuple[int, ...]
    kernel_choices: tuple[int, ...]
    stride_choices: tuple[int, ...]
    finetune_checkpoints: tuple[str, ...]
    arms: tuple[ArmSpec, ...] = field(default_factory=tuple)

    def violations(self) -> list[str]:
        problems = []
        if self.dataset not in _DATASET_KINDS:
            problems.append(f"dataset must be one of {_DATASET_KINDS}, got {self.dataset!r}")
        if self.dataset != "synth" and not self.data_dir:
            problems.append(f"dataset {self.dataset!r} needs data_dir")
        if self.repetitions < 1:
            problems.append(f"repetitions {self.repetitions} must be at least 1")
        if self.train_size < 1 or self.val_size < 1:
            problems.append("train_size and val_size must be at least 1")
        if self.test_size < 0:
            problems.append("test_size must be non-negative")
        names = [arm.name for arm in self.arms]
        if not names:
            problems.append("at least one [arm NAME] section is required")
        if len(set(names)) != len(names):
            problems.append(f"arm names must be unique, got {names}")
        for arm in self.arms:
            if arm.epochs_per_eval < 1:
                problems.append(f"arm {arm.name}: epochs_per_eval must be at least 1")
        for label in self.finetune_checkpoints:
            if label != "final" and not label.isdigit():
                problems.append(
                    f"finetune checkpoint {label!r} must be 'final' or an epoch count"
                )
        # everything EAConfig checks, checked once with a representative arm
        if self.arms:
            problems.extend(self.ea_config(self.arms[0], 0).violations())
        return problems

    def ea_config(self, arm: ArmSpec, repetition: int) -> EAConfig:
        h, w, c = self.image_size
        return EAConfig(
            niche_rate=self.niche_rate,
            niche_depth=self.niche_depth,
            epochs_per_eval=arm.epochs_per_eval,
            epoch_budget=self.epoch_budget,
            filter_choices=self.filter_choices,
            kernel_choices=self.kernel_choices,
            stride_choices=self.stride_choices,
            inheritance=arm.inheritance,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            checkpoint_interval=self.checkpoint_interval,
            seed=self.base_seed + repetition,
            num_classes=self.num_classes,
            image_height=h,
            image_width=w,
            image_channels=c,
        )


def _parse_int_tuple(raw: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{what}: cannot parse {raw!r} as integers") from exc


def _parse_bool(raw: str, what: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{what}: cannot parse {raw!r} as a boolean")


def _parse_image_size(raw: str) -> tuple[int, int, int]:
    parts = raw.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"image_size must be HxWxC, got {raw!r}")
    try:
        h, w, c = (int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"image_size must be HxWxC integers, got {raw!r}") from exc
    return h, w, c


def parse_experiment_config(path: str) -> ExperimentConfig:
    """Read and fully validate an experiment config file.

    The file is INI-shaped: one [experiment] section plus one [arm NAME]
    section per arm. Unknown sections or keys are errors, as is a missing or
    mismatched schema_version.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case so unknown-key messages are faithful
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc

    if "experiment" not in parser:
        raise ConfigError(f"{path}: missing [experiment] section")
    exp = parser["experiment"]
    unknown = set(exp) - _EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown [experiment] keys {sorted(unknown)}")
    version_raw = exp.get("schema_version")
    if version_raw is None:
        raise ConfigError(f"{path}: schema_version is required")
    if version_raw.strip() != str(EXPERIMENT_SCHEMA_VERSION):
        raise ConfigError(
            f"{path}: schema_version {version_raw.strip()!r}, this build reads "
            f"{EXPERIMENT_SCHEMA_VERSION} only"
        )

    def get(key: str, default: str) -> str:
        return exp.get(key, default).strip()

    def get_int(key: str, default: str) -> int:
        raw = get(key, default)
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}: {key} must be an integer, got {raw!r}") from exc

    def get_float(key: str, default: str) -> float:
        raw = get(key, default)
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}: {key} must be a number, got {raw!r}") from exc

    arms = []
    for section in parser.sections():
        if section == "experiment":
            continue
        if not section.startswith("arm "):
            raise ConfigError(f"{path}: unknown section [{section}]")
        name = section[4:].strip()
        if not _ARM_NAME.match(name):
            raise ConfigError(
                f"{path}: arm name {name!r} must match [A-Za-z0-9_-]+ "
                "(it becomes a directory name)"
            )
        sec = parser[section]
        unknown = set(sec) - _ARM_KEYS
        if unknown:
            raise ConfigError(f"{path}: unknown [{section}] keys {sorted(unknown)}")
        if "inheritance" not in sec or "epochs_per_eval" not in sec:
            raise ConfigError(
                f"{path}: [{section}] needs both inheritance and epochs_per_eval"
            )
        try:
            epochs = int(sec["epochs_per_eval"].strip())
        except ValueError as exc:
            raise ConfigError(
                f"{path}: [{section}] epochs_per_eval must be an integer"
            ) from exc
        arms.append(
            ArmSpec(
                name=name,
                inheritance=_parse_bool(sec["inheritance"], f"[{section}] inheritance"),
                epochs_per_eval=epochs,
            )
        )

    finetune_raw = get("finetune_checkpoints", "")
    finetune = tuple(part.strip() for part in finetune_raw.split(",") if part.strip())

    cfg = ExperimentConfig(
        name=get("name", "experiment"),
        dataset=get("dataset", "synth"),
        data_dir=get("data_dir", ""),
        train_size=get_int("train_size", "4000"),
        val_size=get_int("val_size", "1000"),
        test_size=get_int("test_size", "1000"),
        num_classes=get_int("num_classes", "10"),
        image_size=_parse_image_size(get("image_size", "28x28x1")),
        difficulty=get_float("difficulty", "1.0"),
        repetitions=get_int("repetitions", "1"),
        base_seed=get_int("base_seed", "0"),
        niche_rate=get_float("niche_rate", "0.1"),
        niche_depth=get_int("niche_depth", "5"),
        epoch_budget=get_int("epoch_budget", "512"),
        batch_size=get_int("batch_size", "512"),
        learning_rate=get_float("learning_rate", "0.001"),
        checkpoint_interval=get_int("checkpoint_interval", "128"),
        filter_choices=_parse_int_tuple(
            get("filter_choices", "16,32,64,96,128,192,256"), "filter_choices"
        ),
        kernel_choices=_parse_int_tuple(get("kernel_choices", "1,3,5"), "kernel_choices"),
        stride_choices=_parse_int_tuple(get("stride_choices", "1,2"), "stride_choices"),
        finetune_checkpoints=finetune,
        arms=tuple(arms),
    )
    problems = cfg.violations()
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    return cfg


def load_experiment_dataset(cfg: ExperimentConfig) -> Dataset:
    """Materialize the configured dataset with the configured split sizes.

    The split permutation is seeded by base_seed, so every arm and
    repetition of one experiment sees identical data.
    """
    sizes = (cfg.train_size, cfg.val_size, cfg.test_size)
    if cfg.dataset == "synth":
        h, w, c = cfg.image_size
        spec = SynthSpec(
            num_classes=cfg.num_classes,
            height=h,
            width=w,
            channels=c,
            n_per_class=-(-cfg.train_size // cfg.num_classes),
            difficulty=cfg.difficulty,
            val_per_class=-(-cfg.val_size // cfg.num_classes),
            test_per_class=-(-max(cfg.test_size, 1) // cfg.num_classes),
        )
        # per-class rounding can overshoot the requested sizes; trim back
        return _trim_synth(synth_dataset(spec, seed=cfg.base_seed), cfg)
    if cfg.dataset == "idx":
        paths = {k: os.path.join(cfg.data_dir, v) for k, v in _IDX_FILES.items()}
        images, labels = load_idx(paths["train_images"], paths["train_labels"])
        test = load_idx(paths["test_images"], paths["test_labels"])
        return split(
            images, labels, sizes, seed=cfg.base_seed, test=test, name="idx"
        )
    if cfg.dataset in ("cifar10", "cifar100"):
        images, labels = load_cifar(cfg.data_dir, cfg.dataset)
        test = load_cifar_test(cfg.data_dir, cfg.dataset)
        return split(
            images, labels, sizes, seed=cfg.base_seed, test=test, name=cfg.dataset
        )
    raise ConfigError(f"unknown dataset kind {cfg.dataset!r}")


def _trim_synth(full: Dataset, cfg: ExperimentConfig) -> Dataset:
    """Cut generated per-class-rounded splits down to the requested sizes."""
    from .data import Split

    def trim(part, want):
        if want and want < len(part):
            rng = np.random.default_rng((cfg.base_seed, len(part), want))
            idx = np.sort(rng.permutation(len(part))[:want])
            return Split(part.images[idx].copy(), part.labels[idx].copy())
        return part

    return Dataset(
        name=full.name,
        num_classes=full.num_classes,
        train=trim(full.train, cfg.train_size),
        val=trim(full.val, cfg.val_size),
        test=trim(full.test, cfg.test_size),
    )


def _write_csv(path: str, columns: tuple[str, ...], rows: list[dict]) -> str:
    from .evolution import _cell

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[col]) for col in columns])
    return path


def _run_dir(out_dir: str, arm: str, repetition: int) -> str:
    return os.path.join(out_dir, arm, f"rep{repetition}")


def _execute_run(
    cfg: ExperimentConfig, arm: ArmSpec, repetition: int, dataset: Dataset, out_dir: str
) -> dict:
    run_dir = _run_dir(out_dir, arm.name, repetition)
    ea_cfg = cfg.ea_config(arm, repetition)
    result = run_ea(ea_cfg, dataset, checkpoint_dir=run_dir)
    write_run_log(os.path.join(run_dir, "runlog.csv"), result.log)
    return {
        "arm": arm.name,
        "repetition": repetition,
        "seed": ea_cfg.seed,
        "evaluations": len(result.log),
        "cumulative_epochs": result.log[-1].cumulative_epochs,
        "best_val_fitness": float(result.best.fitness),
        "best_block_count": len(result.best.genome.blocks),
        "total_flops": float(sum(rec.flops_estimate for rec in result.log)),
    }


def _worker_run(cfg: ExperimentConfig, arm: ArmSpec, repetition: int, out_dir: str) -> dict:
    # worker processes load the dataset themselves; it is deterministic
    return _execute_run(cfg, arm, repetition, load_experiment_dataset(cfg), out_dir)


def _resolve_checkpoint(run_dir: str, label: str) -> tuple[int, str] | None:
    """Map a checkpoint label ('final' or an epoch count) to a saved file."""
    found = []
    if os.path.isdir(run_dir):
        for name in os.listdir(run_dir):
            m = re.fullmatch(r"ckpt_(\d+)\.npz", name)
            if m:
                found.append((int(m.group(1)), os.path.join(run_dir, name)))
    if not found:
        return None
    found.sort()
    if label == "final":
        return found[-1]
    epoch = int(label)
    at_or_after = [item for item in found if item[0] >= epoch]
    return at_or_after[0] if at_or_after else None


def finetune_runs(
    cfg: ExperimentConfig,
    out_dir: str,
    dataset: Dataset,
    run_rows: list[dict],
) -> tuple[list[dict], list[dict]]:
    """Fine-tune every requested checkpoint of every finished run.

    Returns (finetune rows, failure rows). The fine-tune rng is seeded from
    (run seed, checkpoint epochs, 1), disjoint from every evaluation stream.
    """
    rows, failures = [], []
    schedule = FinetuneSchedule(batch_size=cfg.batch_size)
    for run in run_rows:
        run_dir = _run_dir(out_dir, run["arm"], run["repetition"])
        for label in cfg.finetune_checkpoints:
            resolved = _resolve_checkpoint(run_dir, label)
            if resolved is None:
                failures.append(
                    {
                        "arm": run["arm"],
                        "repetition": run["repetition"],
                        "stage": f"finetune:{label}",
                        "error": f"no checkpoint matches {label!r} in {run_dir}",
                    }
                )
                continue
            tag, path = resolved
            try:
                individual, epochs = load_checkpoint(path)
                rng = np.random.default_rng(
                    np.random.SeedSequence((run["seed"], tag, 1))
                )
                accuracy = train_to_completion(individual, dataset, schedule, rng)
                rows.append(
                    {
                        "arm": run["arm"],
                        "repetition": run["repetition"],
                        "checkpoint": label,
                        "checkpoint_epochs": epochs,
                        "test_accuracy": float(accuracy),
                    }
                )
            except ConvevoError as exc:
                failures.append(
                    {
                        "arm": run["arm"],
                        "repetition": run["repetition"],
                        "stage": f"finetune:{label}",
                        "error": str(exc),
                    }
                )
    return rows, failures


def summarize_finetune(rows: list[dict]) -> list[dict]:
    """Min/mean/std/max test accuracy per (arm, checkpoint label)."""
    groups: dict[tuple[str, str], list[float]] = {}
    order = []
    for row in rows:
        key = (row["arm"], row["checkpoint"])
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row["test_accuracy"])
    out = []
    for arm, checkpoint in order:
        values = np.array(groups[(arm, checkpoint)], dtype=np.float64)
        out.append(
            {
                "arm": arm,
                "checkpoint": checkpoint,
                "n": len(values),
                "min_test_accuracy": float(values.min()),
                "mean_test_accuracy": float(values.mean()),
                "std_test_accuracy": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
                "max_test_accuracy": float(values.max()),
            }
        )
    return out


def _best_so_far(records: list[RunRecord]) -> list[tuple[int, float]]:
    """Running maximum of evaluated fitness against cumulative epochs."""
    out = []
    best = float("-inf")
    for rec in records:
        best = max(best, rec.child_fitness)
        out.append((rec.cumulative_epochs, best))
    return out


def _incumbent_blocks(records: list[RunRecord]) -> list[tuple[int, int]]:
    """Block count of the surviving parent over time, starting at epoch 0.

    Reconstructed from the log: an accepted non-niche record replaces the
    parent directly; a niche (a rejected record followed by depth-tagged
    records) replaces it afterwards iff its best member, the rejected origin
    included, strictly beats the parent.
    """
    if not records:
        return []
    out = [(0, records[0].block_count)]
    inc_fit = records[0].child_fitness
    out.append((records[0].cumulative_epochs, records[0].block_count))
    i = 1
    while i < len(records):
        rec = records[i]
        if rec.niche_depth is not None:
            raise ValueError(f"unexpected niche record at index {i} without an origin")
        if rec.accepted:
            inc_fit = rec.child_fitness
            out.append((rec.cumulative_epochs, rec.block_count))
            i += 1
            continue
        # possibly a niche excursion rooted at this rejected child
        j = i + 1
        candidates = [rec]
        while j < len(records) and records[j].niche_depth is not None:
            candidates.append(records[j])
            j += 1
        if len(candidates) > 1:
            best = max(candidates, key=lambda r: r.child_fitness)
            if best.child_fitness > inc_fit:
                inc_fit = best.child_fitness
                out.append((records[j - 1].cumulative_epochs, best.block_count))
        i = j
    return out


def _step_value(series: list[tuple[int, float]], epoch: int) -> float:
    """Step interpolation: the last value at or before `epoch` (flat ends)."""
    value = series[0][1]
    for at, v in series:
        if at > epoch:
            break
        value = v
    return float(value)


def emit_plot_data(logs_by_arm: dict[str, list[list[RunRecord]]], out_dir: str) -> list[str]:
    """Write per-arm curve CSVs derived from run logs alone.

    For each arm: best_fitness_<arm>.csv holds the per-repetition running
    maximum of evaluated validation fitness plus its mean, and
    block_count_<arm>.csv the mean surviving-parent block count, both
    against cumulative training epochs. Repetitions log different epoch
    grids whenever niches overrun, so every run is step-interpolated onto
    the union grid; a '#' comment line in each file says so.
    """
    from .evolution import _cell

    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    written = []
    for arm, logs in logs_by_arm.items():
        if not logs:
            continue
        fitness_series = [_best_so_far(records) for records in logs]
        blocks_series = [_incumbent_blocks(records) for records in logs]

        grid = sorted({at for series in fitness_series for at, _ in series})
        path = os.path.join(plots_dir, f"best_fitness_{arm}.csv")
        with open(path, "w", newline="") as fh:
            fh.write(
                "# per-repetition best-so-far validation fitness vs cumulative "
                "training epochs; step-interpolated onto the union epoch grid\n"
            )
            writer = csv.writer(fh)
            writer.writerow(
                ["cumulative_epochs"]
                + [f"rep{i}" for i in range(len(logs))]
                + ["mean"]
            )
            for epoch in grid:
                values = [_step_value(series, epoch) for series in fitness_series]
                writer.writerow(
                    [epoch] + [_cell(v) for v in values] + [_cell(float(np.mean(values)))]
                )
        written.append(path)

        grid = sorted({at for series in blocks_series for at, _ in series})
        path = os.path.join(plots_dir, f"block_count_{arm}.csv")
        with open(path, "w", newline="") as fh:
            fh.write(
                "# mean surviving-parent block count vs cumulative training epochs; "
                "step-interpolated onto the union epoch grid\n"
            )
            writer = csv.writer(fh)
            writer.writerow(["cumulative_epochs", "mean_block_count"])
            for epoch in grid:
                values = [_step_value(series, epoch) for series in blocks_series]
                writer.writerow([epoch, _cell(float(np.mean(values)))])
        written.append(path)
    return written


@dataclass
class ExperimentResult:
    run_rows: list[dict]
    finetune_rows: list[dict]
    summary_rows: list[dict]
    failure_rows: list[dict]
    files: list[str]


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str,
    force: bool = False,
    seed_override: int | None = None,
    arm_names: list[str] | None = None,
    jobs: int = 1,
) -> ExperimentResult:
    """Execute every (arm, repetition) run and write all result tables.

    The output directory must be empty (or missing) unless force is given;
    forced reruns overwrite files in place and never delete anything else.
    Failed runs are recorded in failures.csv and skipped; the experiment
    raises RunFailure only when some arm has no surviving run at all.
    jobs > 1 runs repetitions in parallel worker processes; artifacts are
    identical either way, single-job mode is just byte-reproducible start
    to finish in one process.
    """
    if seed_override is not None:
        cfg = replace(cfg, base_seed=seed_override)
        problems = cfg.violations()
        if problems:
            raise ConfigError("; ".join(problems))
    arms = list(cfg.arms)
    if arm_names:
        known = {arm.name: arm for arm in cfg.arms}
        missing = [name for name in arm_names if name not in known]
        if missing:
            raise ConfigError(f"unknown arm names {missing}; config has {sorted(known)}")
        arms = [known[name] for name in arm_names]
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty; pass --force to reuse")
    os.makedirs(out_dir, exist_ok=True)

    dataset = load_experiment_dataset(cfg)
    tasks = [(arm, rep) for arm in arms for rep in range(cfg.repetitions)]
    run_rows: list[dict] = []
    failure_rows: list[dict] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(_worker_run, cfg, arm, rep, out_dir): (arm, rep)
                for arm, rep in tasks
            }
            for future, (arm, rep) in futures.items():
                try:
                    run_rows.append(future.result())
                except Exception as exc:  # noqa: BLE001 - worker failures become rows
                    failure_rows.append(
                        {"arm": arm.name, "repetition": rep, "stage": "run", "error": str(exc)}
                    )
    else:
        for arm, rep in tasks:
            try:
                run_rows.append(_execute_run(cfg, arm, rep, dataset, out_dir))
            except ConvevoError as exc:
                failure_rows.append(
                    {"arm": arm.name, "repetition": rep, "stage": "run", "error": str(exc)}
                )
    order = {(arm.name, rep): i for i, (arm, rep) in enumerate(tasks)}
    run_rows.sort(key=lambda row: order[(row["arm"], row["repetition"])])

    survivors = {row["arm"] for row in run_rows}
    dead_arms = [arm.name for arm in arms if arm.name not in survivors]
    if dead_arms:
        _write_csv(os.path.join(out_dir, "failures.csv"), FAILURES_COLUMNS, failure_rows)
        raise RunFailure(f"every repetition failed for arm(s) {dead_arms}")

    files = [_write_csv(os.path.join(out_dir, "runs.csv"), RUNS_COLUMNS, run_rows)]

    finetune_rows, finetune_failures = finetune_runs(cfg, out_dir, dataset, run_rows)
    failure_rows.extend(finetune_failures)
    files.append(
        _write_csv(os.path.join(out_dir, "finetune.csv"), FINETUNE_COLUMNS, finetune_rows)
    )
    files.append(
        _write_csv(
            os.path.join(out_dir, "summary.csv"),
            SUMMARY_COLUMNS,
            summarize_finetune(finetune_rows),
        )
    )
    if failure_rows:
        files.append(
            _write_csv(os.path.join(out_dir, "failures.csv"), FAILURES_COLUMNS, failure_rows)
        )

    logs_by_arm = {
        arm.name: [
            read_run_log(os.path.join(_run_dir(out_dir, arm.name, rep), "runlog.csv"))
            for rep in range(cfg.repetitions)
            if os.path.exists(os.path.join(_run_dir(out_dir, arm.name, rep), "runlog.csv"))
        ]
        for arm in arms
    }
    files.extend(emit_plot_data(logs_by_arm, out_dir))
    summary_rows = summarize_finetune(finetune_rows)
    return ExperimentResult(
        run_rows=run_rows,
        finetune_rows=finetune_rows,
        summary_rows=summary_rows,
        failure_rows=failure_rows,
        files=files,
    )


def _read_table(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise ConfigError(f"{path} does not exist; run the experiment first")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def collect_plotdata(out_dir: str) -> list[str]:
    """Rebuild the plot CSVs from the run logs already on disk."""
    logs_by_arm: dict[str, list[list[RunRecord]]] = {}
    for arm in sorted(os.listdir(out_dir)):
        arm_dir = os.path.join(out_dir, arm)
        if not os.path.isdir(arm_dir) or arm == "plots":
            continue
        logs = []
        for rep_name in sorted(
            (n for n in os.listdir(arm_dir) if re.fullmatch(r"rep\d+", n)),
            key=lambda n: int(n[3:]),
        ):
            log_path = os.path.join(arm_dir, rep_name, "runlog.csv")
            if os.path.exists(log_path):
                logs.append(read_run_log(log_path))
        if logs:
            logs_by_arm[arm] = logs
    if not logs_by_arm:
        raise ConfigError(f"no run logs found under {out_dir}")
    return emit_plot_data(logs_by_arm, out_dir)


def stats_report(out_dir: str, metric: str = "test_accuracy") -> list[dict]:
    """Pairwise one-sided U tests between arms on a stored result column.

    metric "test_accuracy" reads finetune.csv (one comparison per checkpoint
    label); "best_val_fitness" reads runs.csv. Every ordered arm pair is
    tested with the alternative 'first arm greater'. Rows are written to
    stats.csv and returned.
    """
    if metric == "test_accuracy":
        rows = _read_table(os.path.join(out_dir, "finetune.csv"))
        by_group: dict[tuple[str, str], list[float]] = {}
        for row in rows:
            by_group.setdefault((row["checkpoint"], row["arm"]), []).append(
                float(row["test_accuracy"])
            )
        checkpoints = sorted({cp for cp, _ in by_group})
        arms = sorted({arm for _, arm in by_group})
        groups = {
            cp: {arm: by_group[(cp, arm)] for arm in arms if (cp, arm) in by_group}
            for cp in checkpoints
        }
    elif metric == "best_val_fitness":
        rows = _read_table(os.path.join(out_dir, "runs.csv"))
        by_arm: dict[str, list[float]] = {}
        for row in rows:
            by_arm.setdefault(row["arm"], []).append(float(row["best_val_fitness"]))
        groups = {"final": by_arm}
    else:
        raise ConfigError(
            f"metric must be test_accuracy or best_val_fitness, got {metric!r}"
        )

    out = []
    for checkpoint, by_arm in groups.items():
        arms = sorted(by_arm)
        for arm_a in arms:
            for arm_b in arms:
                if arm_a == arm_b:
                    continue
                u, p = mann_whitney_u_one_sided(by_arm[arm_a], by_arm[arm_b])
                out.append(
                    {
                        "metric": metric,
                        "checkpoint": checkpoint,
                        "arm_a": arm_a,
                        "arm_b": arm_b,
                        "n_a": len(by_arm[arm_a]),
                        "n_b": len(by_arm[arm_b]),
                        "u_statistic": u,
                        "p_value": p,
                    }
                )
    _write_csv(os.path.join(out_dir, "stats.csv"), STATS_COLUMNS, out)
    return out


def finetune_report(cfg: ExperimentConfig, out_dir: str) -> ExperimentResult:
    """Standalone fine-tune pass over checkpoints already on disk."""
    run_rows = [
        {
            "arm": row["arm"],
            "repetition": int(row["repetition"]),
            "seed": int(row["seed"]),
        }
        for row in _read_table(os.path.join(out_dir, "runs.csv"))
    ]
    dataset = load_experiment_dataset(cfg)
    finetune_rows, failures = finetune_runs(cfg, out_dir, dataset, run_rows)
    files = [
        _write_csv(os.path.join(out_dir, "finetune.csv"), FINETUNE_COLUMNS, finetune_rows),
        _write_csv(
            os.path.join(out_dir, "summary.csv"),
            SUMMARY_COLUMNS,
            summarize_finetune(finetune_rows),
        ),
    ]
    if failures:
        files.append(
            _write_csv(os.path.join(out_dir, "failures.csv"), FAILURES_COLUMNS, failures)
        )
    return ExperimentResult(
        run_rows=run_rows,
        finetune_rows=finetune_rows,
        summary_rows=summarize_finetune(finetune_rows),
        failure_rows=failures,
        files=files,
    )
