"""Experiment harness: simulate, split, train, eval, gridsearch, ablate.

Configuration is resolved in three layers: a named preset (``desk`` or
``paper``), then a flat JSON object from ``--config`` (unknown keys are
rejected), then explicit command-line flags. Every random draw derives from
``seed``: the dataset uses it directly and trial ``r`` uses
``trial_seed(seed, r)`` for its split, labeled/unlabeled selection, model
init and training stream.

Exit status: 0 on success, 1 on a configuration error, 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from rffssl import dataio, semisup, sigsim
from rffssl import nn as rnn
from rffssl.augment import AugmentationSpec, make_augmenter, rotation_set_for
from rffssl.dataio import Dataset, SplitSpec, UnlabeledSet
from rffssl.sigsim import ConfigError

log = logging.getLogger("rffssl")

SCHEMA_VERSION = 1
RESULT_FIELDS = ("schema", "method", "M", "N", "trial", "seed", "accuracy", "failed", "seconds")
ABLATION_VARIANTS = (
    "none", "rotation", "flipping", "noise",
    "permutation2", "permutation4", "permutation8", "permutation16",
    "composite",
)
KAPPA_GRID = (0.0, 0.25, 0.5, 0.75)
TAU_GRID = (0.5, 0.6, 0.7, 0.75, 0.8, 0.9)


@dataclass
class ExperimentConfig:
    """Flat experiment description; this is also the JSON config schema."""

    # simulation
    devices: int = 10
    per_device: int = 10000
    modulation: str = "QPSK"
    snr_db: float = 18.0
    backoff_db: float = 0.0
    sample_len: int = 1024
    sps: int = 8
    rolloff: float = 0.35
    filter_span: int = 10
    # 0 uses the tabulated device rows; > 0 jitters the first row per device
    profile_jitter: float = 0.0
    # split and label budget
    split_ratios: tuple[int, int, int] = (3, 1, 1)
    M: int = 10
    N: int = 1000
    # model
    blocks: int = 2
    width: int = 64
    # trainer
    mode: str = "proposal"
    kappa: float = 0.5
    tau: float = 0.7
    epochs: int = 230
    labeled_batch: int = 32
    pseudo_batch: int = 32
    lr: float | None = None
    k_segments: int = 2
    augmentation: str = "composite"
    steps_per_epoch: int | None = None
    joint_forward: bool = True
    # experiment
    trials: int = 20
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.devices < 2:
            raise ConfigError("need at least two devices")
        if self.per_device < 1:
            raise ConfigError("per_device must be >= 1")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        # build every sub-config once so invalid values fail early
        try:
            self.simulation()
            self.split_spec(0)
            self.model_config()
            self.trainer_config()
            make_augmenter(self.augmentation, self.modulation, self.k_segments)
            if self.profile_jitter == 0:
                sigsim.default_profiles(self.devices)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def simulation(self) -> sigsim.SimulationConfig:
        return sigsim.SimulationConfig(
            modulation=sigsim.parse_modulation(self.modulation),
            sps=self.sps,
            rolloff=self.rolloff,
            filter_span=self.filter_span,
            sample_len=self.sample_len,
            snr_db=self.snr_db,
            backoff_db=self.backoff_db,
            seed=self.seed,
        )

    def profiles(self) -> list[sigsim.DeviceProfile]:
        if self.profile_jitter == 0:
            return sigsim.default_profiles(self.devices)
        rng = np.random.default_rng([self.seed, 0x9F])
        return sigsim.perturb_profiles(sigsim.DEVICE_TABLE[0], self.profile_jitter, self.devices, rng)

    def split_spec(self, seed: int) -> SplitSpec:
        return SplitSpec(self.split_ratios, self.M, self.N, seed)

    def model_config(self) -> rnn.ModelConfig:
        return rnn.ModelConfig(
            num_classes=self.devices,
            num_conv_blocks=self.blocks,
            stem_kernels=self.width,
            block_channels=self.width,
            input_len=self.sample_len,
        )

    def trainer_config(self, **overrides) -> semisup.TrainerConfig:
        spec = AugmentationSpec(rotation_set_for(self.modulation), self.k_segments)
        labeled = None if self.augmentation == "composite" else make_augmenter(self.augmentation, self.modulation, self.k_segments)
        cfg = semisup.TrainerConfig(
            kappa=self.kappa,
            tau=self.tau,
            epochs=self.epochs,
            labeled_batch=self.labeled_batch,
            pseudo_batch=self.pseudo_batch,
            lr=self.lr,
            mode=self.mode,
            augmentation=spec,
            labeled_augmenter=labeled,
            use_labeled_augmentation=self.augmentation != "none",
            steps_per_epoch=self.steps_per_epoch,
            joint_forward=self.joint_forward,
        )
        return replace(cfg, **overrides) if overrides else cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


PRESETS: dict[str, dict] = {
    # full-size regime; hours per trial on a CPU
    "paper": dict(
        devices=10, per_device=10000, blocks=2, width=64, epochs=230, trials=20,
        M=10, N=1000, labeled_batch=32, pseudo_batch=32,
    ),
    # minutes per trial on one CPU core; 1000 records per device so that
    # N=500 unlabeled samples fit inside the 3:1:1 training share
    "desk": dict(
        devices=4, per_device=1000, blocks=1, width=32, epochs=40, trials=5,
        M=10, N=500, labeled_batch=16, pseudo_batch=16, steps_per_epoch=50, lr=1e-3,
    ),
}


def config_from_dict(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = (base or ExperimentConfig()).to_dict()
    merged.update(values)
    try:
        return ExperimentConfig(**merged)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return config_from_dict({**PRESETS[name], **overrides})


def trial_seed(seed: int, trial: int) -> int:
    """Per-trial 63-bit seed derived from the experiment seed."""
    return int(np.random.SeedSequence([seed, trial]).generate_state(1, np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------- results


@dataclass
class ResultRow:
    method: str
    M: int
    N: int
    trial: int
    seed: int
    accuracy: float
    failed: bool
    seconds: float

    def __post_init__(self):
        if not self.failed and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1] unless the trial failed")

    def as_csv(self) -> list:
        return [SCHEMA_VERSION, self.method, self.M, self.N, self.trial, self.seed,
                repr(float(self.accuracy)), int(self.failed), f"{self.seconds:.3f}"]


def write_rows(path: Path, rows: Sequence[ResultRow]) -> None:
    """Append rows, writing the header only for a new file.

    An existing file with a different header is refused rather than mixed.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists() and path.stat().st_size:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if tuple(header or ()) != RESULT_FIELDS:
            raise RuntimeError(f"{path} has an incompatible header {header}")
        mode, new = "a", False
    else:
        mode, new = "w", True
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_FIELDS)
        w.writerows(r.as_csv() for r in rows)


def read_rows(path: Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for rec in reader:
            if int(rec["schema"]) != SCHEMA_VERSION:
                raise RuntimeError(f"unsupported result schema {rec['schema']}")
            out.append(ResultRow(
                rec["method"], int(rec["M"]), int(rec["N"]), int(rec["trial"]), int(rec["seed"]),
                float(rec["accuracy"]), bool(int(rec["failed"])), float(rec["seconds"]),
            ))
    return out


def summarize(rows: Sequence[ResultRow]) -> list[dict]:
    """Mean and sample std of accuracy over successful trials, per (method, M, N)."""
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.M, r.N), []).append(r)
    out = []
    for (method, M, N), rs in groups.items():
        acc = np.array([r.accuracy for r in rs if not r.failed])
        out.append(dict(
            method=method, M=M, N=N, trials=len(rs), failed=sum(r.failed for r in rs),
            mean=float(acc.mean()) if len(acc) else math.nan,
            # a single trial has no sample spread
            std=float(acc.std(ddof=1)) if len(acc) > 1 else math.nan,
        ))
    return out


def format_summary(s: dict) -> str:
    return f"{s['method']:<28} M={s['M']:<4} N={s['N']:<5} {100 * s['mean']:6.2f} ± {100 * s['std']:.2f}  ({s['trials'] - s['failed']}/{s['trials']} ok)"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------- trials


class TrackedUnlabeledSet(UnlabeledSet):
    """UnlabeledSet that counts reads of its sample data."""

    _TRACKED = frozenset({"signals", "ids", "hidden_labels"})

    def __post_init__(self):
        object.__setattr__(self, "reads", 0)
        super().__post_init__()
        object.__setattr__(self, "reads", 0)

    def __getattribute__(self, name):
        if name in TrackedUnlabeledSet._TRACKED:
            object.__setattr__(self, "reads", object.__getattribute__(self, "reads") + 1)
        return object.__getattribute__(self, name)

    def __len__(self) -> int:
        object.__setattr__(self, "reads", self.reads + 1)
        return len(object.__getattribute__(self, "ids"))


@dataclass
class TrialOutcome:
    row: ResultRow
    result: semisup.TrainResult
    unlabeled_reads: int
    test: Dataset = field(repr=False)


def simulate(config: ExperimentConfig) -> Dataset:
    return sigsim.build_dataset(config.profiles(), config.simulation(), config.per_device)


def run_trial(config: ExperimentConfig, dataset: Dataset, trial: int, method: str | None = None, **trainer_overrides) -> TrialOutcome:
    seed = trial_seed(config.seed, trial)
    train_part, _val, test = dataio.split_dataset(dataset, config.split_spec(seed))
    labeled, unlabeled = dataio.select_semisup(train_part, config.M, config.N, seed)
    unlabeled = TrackedUnlabeledSet(unlabeled.signals, unlabeled.ids, unlabeled.hidden_labels)
    tcfg = config.trainer_config(**trainer_overrides)
    model = rnn.build_model(config.model_config(), seed)
    t0 = time.perf_counter()
    result = semisup.train(model, labeled, unlabeled, tcfg, seed)
    acc = math.nan if result.failed else semisup.evaluate(model, test.signals, test.labels)
    row = ResultRow(method or tcfg.mode, config.M, config.N, trial, seed, acc, result.failed, time.perf_counter() - t0)
    return TrialOutcome(row, result, unlabeled.reads, test)


def _write_epoch_log(path: Path, result: semisup.TrainResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_s", "loss_u", "pseudo_size", "pseudo_accuracy", "eval_accuracy"])
        for e in result.log:
            w.writerow([e.epoch, e.loss_s, e.loss_u, e.pseudo_size,
                        "" if e.pseudo_accuracy is None else e.pseudo_accuracy,
                        "" if e.eval_accuracy is None else e.eval_accuracy])


def load_or_simulate(config: ExperimentConfig, data: str | None) -> Dataset:
    if data:
        ds = dataio.load_dataset(data)
        if ds.num_classes != config.devices:
            raise ConfigError(f"dataset has {ds.num_classes} classes but config says devices={config.devices}")
        return ds
    return simulate(config)


# ---------------------------------------------------------------- commands


def cmd_simulate(config: ExperimentConfig, out: Path) -> Path:
    ds = simulate(config)
    path = out / "dataset.rfsd"
    path.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(ds, path)
    print(f"wrote {len(ds)} records ({config.devices} devices x {config.per_device}) to {path}")
    return path


def cmd_split(config: ExperimentConfig, out: Path, data: str | None) -> list[Path]:
    ds = load_or_simulate(config, data)
    parts = dataio.split_dataset(ds, config.split_spec(config.seed))
    paths = []
    for name, part in zip(("train", "val", "test"), parts):
        p = out / f"{name}.rfsd"
        p.parent.mkdir(parents=True, exist_ok=True)
        dataio.save_dataset(part, p)
        paths.append(p)
        print(f"{name}: {len(part)} records -> {p}")
    return paths


def cmd_train(config: ExperimentConfig, out: Path, data: str | None = None) -> list[dict]:
    ds = load_or_simulate(config, data)
    _write_json(out / "config.json", config.to_dict())
    rows = []
    for trial in range(config.trials):
        o = run_trial(config, ds, trial)
        rows.append(o.row)
        tdir = out / f"trial{trial:03d}"
        _write_epoch_log(tdir / "epochs.csv", o.result)
        _write_json(tdir / "trial.json", dict(asdict(o.row), unlabeled_reads=o.unlabeled_reads, failed_epoch=o.result.failed_epoch))
        if not o.result.failed:
            rnn.save_checkpoint(o.result.model, tdir / "model.ckpt")
        status = "FAILED at epoch %s" % o.result.failed_epoch if o.result.failed else f"acc {o.row.accuracy:.4f}"
        print(f"trial {trial}: seed {o.row.seed} {status} ({o.row.seconds:.1f}s)", flush=True)
    write_rows(out / "results.csv", rows)
    summary = summarize(rows)
    _write_json(out / "summary.json", summary)
    for s in summary:
        print(format_summary(s))
    return summary


def cmd_eval(checkpoint: str, data: str, out: Path) -> dict:
    model = rnn.load_checkpoint(checkpoint)
    ds = dataio.load_dataset(data)
    if ds.num_classes != model.config.num_classes:
        raise ConfigError(f"checkpoint has {model.config.num_classes} classes, dataset has {ds.num_classes}")
    pred = semisup.predict_labels(model, ds.signals)
    cm = semisup.confusion_matrix(pred, ds.labels, ds.num_classes)
    report = dict(checkpoint=str(checkpoint), data=str(data), records=len(ds),
                  accuracy=float(np.trace(cm) / cm.sum()))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(range(ds.num_classes)))
        for c, row in enumerate(cm):
            w.writerow([c] + row.tolist())
    _write_json(out / "eval.json", report)
    print(f"accuracy {report['accuracy']:.4f} on {len(ds)} records")
    return report


def best_cell(matrix: np.ndarray, kappas: Sequence[float], taus: Sequence[float]) -> tuple[float, float, float]:
    """Highest mean accuracy; ties go to the lower kappa, then the lower tau."""
    cells = [
        (-matrix[i, j], kappas[i], taus[j])
        for i in range(len(kappas))
        for j in range(len(taus))
        if not math.isnan(matrix[i, j])
    ]
    if not cells:
        raise RuntimeError("every grid cell failed")
    neg, k, t = min(cells)
    return k, t, -neg


def cmd_gridsearch(config: ExperimentConfig, out: Path, kappas: Sequence[float], taus: Sequence[float], data: str | None = None) -> dict:
    if not kappas or not taus:
        raise ConfigError("grids must be non-empty")
    ds = load_or_simulate(config, data)
    _write_json(out / "config.json", config.to_dict())
    matrix = np.full((len(kappas), len(taus)), math.nan)
    rows = []
    for i, k in enumerate(kappas):
        for j, t in enumerate(taus):
            cell_cfg = replace(config, kappa=k, tau=t, mode="proposal")
            cell = [run_trial(cell_cfg, ds, r, method=f"proposal k={k} t={t}").row for r in range(config.trials)]
            rows.extend(cell)
            (s,) = summarize(cell)
            matrix[i, j] = s["mean"]
            print(format_summary(s), flush=True)
    write_rows(out / "grid_rows.csv", rows)
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kappa\\tau"] + list(taus))
        for k, line in zip(kappas, matrix):
            w.writerow([k] + [repr(float(v)) for v in line])
    k, t, acc = best_cell(matrix, kappas, taus)
    best = dict(kappa=k, tau=t, mean=acc)
    _write_json(out / "best.json", best)
    print(f"best kappa={k} tau={t} mean={acc:.4f}")
    return dict(matrix=matrix, best=best)


def cmd_ablate(config: ExperimentConfig, out: Path, variants: Sequence[str], data: str | None = None) -> list[dict]:
    """Supervised training per labeled-data augmentation, paired on trial seeds."""
    for v in variants:
        make_augmenter(v, config.modulation, config.k_segments)
    ds = load_or_simulate(config, data)
    _write_json(out / "config.json", config.to_dict())
    rows = []
    for v in variants:
        cfg = replace(config, mode="supervised", augmentation=v)
        for r in range(config.trials):
            rows.append(run_trial(cfg, ds, r, method=f"supervised+{v}").row)
        print(format_summary(summarize([x for x in rows if x.method == f"supervised+{v}"])[0]), flush=True)
    write_rows(out / "ablation.csv", rows)
    summary = summarize(rows)
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as err:
        raise ConfigError(f"bad number list {text!r}") from err


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with ExperimentConfig fields")
    common.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=semisup.MODES)
    common.add_argument("--M", type=int)
    common.add_argument("--N", type=int)
    common.add_argument("--devices", type=int)
    common.add_argument("--per-device", dest="per_device", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--trials", type=int)
    common.add_argument("--out")
    common.add_argument("--data", help="existing .rfsd dataset; simulated from the config when omitted")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="rffssl", description="RF fingerprinting with semi-supervised training")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="synthesize a dataset file")
    sub.add_parser("split", parents=[common], help="write train/val/test dataset files")
    sub.add_parser("train", parents=[common], help="run R trials and summarize")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset file")
    ev.add_argument("--checkpoint", required=True)
    gs = sub.add_parser("gridsearch", parents=[common], help="kappa x tau sweep in proposal mode")
    gs.add_argument("--kappas", type=_floats, default=list(KAPPA_GRID))
    gs.add_argument("--taus", type=_floats, default=list(TAU_GRID))
    ab = sub.add_parser("ablate", parents=[common], help="supervised augmentation ablation")
    ab.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    return p


_OVERRIDES = ("seed", "mode", "M", "N", "devices", "per_device", "epochs", "trials", "out")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = preset(args.preset)
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
        if not isinstance(values, dict):
            raise ConfigError("config JSON must be an object")
        config = config_from_dict(values, config)
    flags = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k) is not None}
    return config_from_dict(flags, config) if flags else config


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        config = resolve_config(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    out = Path(config.out)
    try:
        if args.command == "simulate":
            cmd_simulate(config, out)
        elif args.command == "split":
            cmd_split(config, out, args.data)
        elif args.command == "train":
            cmd_train(config, out, args.data)
        elif args.command == "eval":
            if not args.data:
                raise ConfigError("eval needs --data")
            cmd_eval(args.checkpoint, args.data, out)
        elif args.command == "gridsearch":
            cmd_gridsearch(config, out, args.kappas, args.taus, args.data)
        elif args.command == "ablate":
            cmd_ablate(config, out, [v.strip() for v in args.variants.split(",") if v.strip()], args.data)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # reported as a runtime failure exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
