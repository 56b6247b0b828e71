"""Desk-scale experiments: data, the training loop, gradient probes, and k-sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from sklearn.datasets import make_moons

from .accounting import megarounded, param_count
from .arch import NetworkSpec, build_cifar_net, build_fc_net, depth, lower, validate
from .errors import DataError, DivergenceError, SpecError
from .nn import backward, forward, init_params, lr_at, sgd_step

log = logging.getLogger(__name__)

CIFAR_RECORD = 1 + 32 * 32 * 3


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: str = "synthetic_moons"
    stats: tuple[np.ndarray, np.ndarray] | None = None  # per-channel mean, std

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise DataError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"label ids must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]


def gen_synthetic(kind: str, count: int, noise: float = 0.0, seed: int = 0, arms: int = 2,
                  split: str = "train") -> Dataset:
    """Two-moons or ``arms``-armed spirals in 2-D, balanced and seeded."""
    if count < 2:
        raise DataError("count must be at least 2")
    if noise < 0:
        raise DataError("noise must be non-negative")
    if kind == "moons":
        x, y = make_moons(n_samples=count, noise=noise or None, shuffle=True, random_state=seed)
        return Dataset(x, y, 2, split, "synthetic_moons")
    if kind == "spirals":
        if arms < 2:
            raise DataError("spirals need at least two arms")
        rng = np.random.default_rng(seed)
        per_arm = [count // arms + (1 if j < count % arms else 0) for j in range(arms)]
        xs, ys = [], []
        for j, m in enumerate(per_arm):
            t = np.sqrt(rng.uniform(0.0, 1.0, m))
            theta = 3.0 * math.pi * t + 2.0 * math.pi * j / arms
            pts = np.c_[t * np.cos(theta), t * np.sin(theta)] + noise * rng.standard_normal((m, 2))
            xs.append(pts)
            ys.append(np.full(m, j))
        order = rng.permutation(count)
        return Dataset(np.concatenate(xs)[order], np.concatenate(ys)[order], arms, split, "synthetic_spirals")
    raise DataError(f"unknown synthetic kind {kind!r}")


def load_cifar_binary(path, downsample_to: int = 32, subset: int | None = None, seed: int = 0,
                      stats=None, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read a CIFAR-10 binary batch (one label byte + 3072 channel-major pixels per record).

    Images are area-averaged to ``downsample_to`` pixels a side and
    normalized per channel. Pass the training set's ``stats`` when loading
    the test split so both share one normalization.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataError(f"{path}: size {raw.size} is not a whole number of {CIFAR_RECORD}-byte records")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise DataError(f"{path}: unknown label byte {labels.max()}")
    if subset is not None and subset < len(labels):
        keep = np.sort(np.random.default_rng(seed).choice(len(labels), subset, replace=False))
        records, labels = records[keep], labels[keep]
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    if downsample_to != 32:
        if downsample_to <= 0 or 32 % downsample_to:
            raise DataError(f"downsample_to must divide 32, got {downsample_to}")
        f = 32 // downsample_to
        images = images.reshape(-1, 3, downsample_to, f, downsample_to, f).mean(axis=(3, 5))
    if stats is None:
        std = images.std(axis=(0, 2, 3))
        stats = (images.mean(axis=(0, 2, 3)), np.where(std > 0, std, 1.0))  # constant channels stay finite
    mean, std = stats
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images, labels, num_classes, split, "cifar_binary_downsampled", stats)


def split_dataset(data: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(data))
    cut = len(data) - int(round(test_fraction * len(data)))
    tr, te = order[:cut], order[cut:]
    return (
        replace(data, inputs=data.inputs[tr], labels=data.labels[tr], split="train"),
        replace(data, inputs=data.inputs[te], labels=data.labels[te], split="test"),
    )


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """SGD recipe. ``milestones`` are fractions of ``epochs`` where the rate drops by ``lr_factor``."""

    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple[float, ...] = (0.3, 0.6, 0.8)
    lr_factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def milestone_epochs(self) -> tuple[int, ...]:
        # never drop before the first epoch, so short runs start at the base rate
        return tuple(max(1, int(round(f * self.epochs))) for f in self.milestones)

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SpecError(f"unknown training options: {sorted(unknown)}")
        if "milestones" in doc:
            doc = {**doc, "milestones": tuple(doc["milestones"])}
        return cls(**doc)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_err: float
    test_err: float
    first_layer_grad_l2: float


HISTORY_COLUMNS = ("epoch", "train_loss", "train_err", "test_err", "first_layer_grad_l2")


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()


def error_rate(graph, params, data: Dataset, batch_size: int = 1024) -> float:
    """Eval-mode classification error in percent."""
    wrong = 0
    for i in range(0, len(data), batch_size):
        logits = forward(graph, params, data.inputs[i:i + batch_size], "eval").logits
        wrong += int((logits.argmax(axis=1) != data.labels[i:i + batch_size]).sum())
    return 100.0 * wrong / len(data)


def train(net: NetworkSpec, data: Dataset, hyper: TrainConfig = TrainConfig(),
          test_data: Dataset | None = None) -> RunHistory:
    """Mini-batch momentum SGD with a step schedule; deterministic per ``hyper.seed``.

    ``train_loss`` and ``train_err`` average the training batches of each
    epoch (train-mode batchnorm). ``test_err`` is the eval-mode error on
    ``test_data``, or on the training set when no test split is given.
    ``first_layer_grad_l2`` is the mean over batches of the L2 norm of the
    first weight layer's loss gradient, before weight decay is added.
    """
    problems = validate(net)
    if problems:
        raise SpecError("; ".join(problems))
    if len(data) == 0:
        raise DataError("empty dataset")
    graph = lower(net)
    params = init_params(graph, hyper.seed)
    first = params.params[graph.first_trainable().id]["weight"]
    rng = np.random.default_rng(hyper.seed)
    milestones = hyper.milestone_epochs()
    evaluate_on = test_data if test_data is not None else data
    history = RunHistory()
    for epoch in range(hyper.epochs):
        lr = lr_at(epoch, hyper.lr, milestones, hyper.lr_factor)
        order = rng.permutation(len(data))
        loss_sum = wrong = seen = 0.0
        grad_norms = []
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            if len(idx) < 2 and seen:
                continue  # batchnorm needs two samples
            x, y = data.inputs[idx], data.labels[idx]
            try:
                params.zero_grad()
                result = forward(graph, params, x, "train", y)
                if not math.isfinite(result.loss):
                    raise DivergenceError("non-finite loss")
                backward(result)
                grad_norms.append(float(np.linalg.norm(first.grad)))
                sgd_step(params, lr, hyper.momentum, hyper.weight_decay)
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch + 1}: {exc}", epoch + 1) from None
            loss_sum += result.loss * len(idx)
            wrong += float((result.logits.argmax(axis=1) != y).sum())
            seen += len(idx)
        history.records.append(EpochRecord(
            epoch + 1,
            loss_sum / seen,
            100.0 * wrong / seen,
            error_rate(graph, params, evaluate_on),
            float(np.mean(grad_norms)),
        ))
        log.debug("epoch %d: %s", epoch + 1, history.records[-1])
    return history


# -- gradient probe ---------------------------------------------------------

def model_name(d: int, k: int, n: int, kind: str) -> str:
    total = 2 + 3 * k * n
    if kind == "bit":
        return f"b({d},{k},{n})-{total}"
    if kind == "plain":
        return f"plainnet-{total}"
    return f"wide resnet-{total}"


def fc_analog(d: int, k: int, n: int, kind: str, data: Dataset, base_width: int = 16) -> NetworkSpec:
    (features,) = data.feature_shape
    return build_fc_net(d, k, n, kind, in_features=features, num_classes=data.num_classes,
                        base_width=base_width)


def _probe_run(args):
    config, seed, data, test_data, hyper, base_width = args
    net = fc_analog(*config, data, base_width)
    return config, seed, train(net, data, replace(hyper, seed=seed), test_data)


PROBE_COLUMNS = ("model", "d", "k", "n", "kind", "depth", "epoch", "seeds",
                 "grad_l2_mean", "grad_l2_stderr", "train_err_mean", "test_err_mean")


def gradprobe(configs, seeds, data: Dataset, epochs: int = 3, hyper: TrainConfig | None = None,
              test_data: Dataset | None = None, base_width: int = 16, workers: int = 1):
    """Train the fully connected analog of each (d, k, n, kind) config once per seed.

    Returns ``(rows, histories)``: per-epoch rows averaged across seeds
    (standard error over seeds for the gradient norm) and the individual
    histories keyed by ``(config, seed)``.
    """
    hyper = replace(hyper or TrainConfig(), epochs=epochs)
    jobs = [(tuple(c), s, data, test_data, hyper, base_width) for c in configs for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_probe_run, jobs))
    else:
        results = [_probe_run(job) for job in jobs]
    histories = {(config, seed): h for config, seed, h in results}
    rows = []
    for config in dict.fromkeys(tuple(c) for c in configs):
        d, k, n, kind = config
        runs = [histories[(config, s)] for s in seeds]
        for e in range(epochs):
            g = np.array([h.records[e].first_layer_grad_l2 for h in runs])
            rows.append({
                "model": model_name(d, k, n, kind),
                "d": d, "k": k, "n": n, "kind": kind,
                "depth": 2 + 3 * k * n,
                "epoch": e + 1,
                "seeds": len(runs),
                "grad_l2_mean": float(g.mean()),
                "grad_l2_stderr": float(g.std(ddof=1) / math.sqrt(len(g))) if len(g) > 1 else 0.0,
                "train_err_mean": float(np.mean([h.records[e].train_err for h in runs])),
                "test_err_mean": float(np.mean([h.records[e].test_err for h in runs])),
            })
    return rows, histories


# -- k sweep ----------------------------------------------------------------

# published parameter counts (millions) for k = 1..6
TABLE5 = {
    (4, 4): (2.7, 3.5, 3.7, 3.7, 3.7, 3.7),
    (12, 2): (10.3, 13.8, 14.7, 14.9, 15.0, 15.0),
}

KSWEEP_COLUMNS = ("d", "n", "k", "depth", "params", "params_m", "params_m_published", "train_err", "test_err")


def ksweep(d: int, n: int, ks, data: Dataset | None = None, hyper: TrainConfig | None = None,
           test_data: Dataset | None = None, base_width: int = 16) -> list[dict]:
    """Parameter count of the CIFAR BitNet for each k, plus desk-scale errors.

    Errors come from training the fully connected analog on ``data`` and are
    left empty when no data is given.
    """
    ks = list(ks)
    if not ks:
        raise SpecError("ks must be non-empty")
    if (16 * d) % (2 ** max(ks)):
        raise SpecError(f"width {16 * d} not divisible by 2^{max(ks)}")
    published = TABLE5.get((d, n))
    rows = []
    for k in ks:
        net = build_cifar_net(d, k, n, "bit")
        total = param_count(net).total_params
        row = {
            "d": d, "n": n, "k": k,
            "depth": depth(net),
            "params": total,
            "params_m": float(megarounded(total)),
            "params_m_published": published[k - 1] if published and 1 <= k <= len(published) else None,
            "train_err": None,
            "test_err": None,
        }
        if data is not None:
            hist = train(fc_analog(d, k, n, "bit", data, base_width), data, hyper or TrainConfig(), test_data)
            row["train_err"] = hist.records[-1].train_err
            row["test_err"] = hist.records[-1].test_err
        rows.append(row)
    return rows


# -- JSON-configured experiments --------------------------------------------

def dataset_from_config(spec: dict, split: str = "train") -> Dataset:
    spec = dict(spec)
    kind = spec.pop("kind")
    seed = spec.get("seed", 0) + (0 if split == "train" else 1)
    if kind in ("moons", "spirals"):
        count = spec["count"] if split == "train" else spec.get("test_count", spec["count"])
        return gen_synthetic(kind, count, spec.get("noise", 0.0), seed, spec.get("arms", 2), split)
    if kind == "cifar_binary":
        raise DataError("cifar_binary datasets need explicit train/test paths; use load_cifar_binary")
    raise DataError(f"unknown dataset kind {kind!r}")


def write_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def run_experiment(config: dict, out_dir=None, workers: int = 1) -> list[dict]:
    """Run a gradient-probe experiment described by a JSON-style dict.

    Keys: ``architectures`` (list of ``{"d","k","n","kind"}``), ``dataset``
    (``{"kind": "moons"|"spirals", "count", "noise", "seed", "test_count"}``),
    ``hyper`` (:class:`TrainConfig` fields), ``seeds``, ``epochs``, ``name``.
    Writes ``<name>__<model>__seed<s>.csv`` per run and ``<name>__aggregate.csv``.
    """
    out_dir = Path(out_dir or os.environ.get("BITNET_LAB_OUT", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    name = config.get("name", "experiment")
    train_set = dataset_from_config(config["dataset"], "train")
    test_set = dataset_from_config(config["dataset"], "test")
    hyper = TrainConfig.from_dict(config.get("hyper", {}))
    epochs = config.get("epochs", hyper.epochs)
    configs = [(a["d"], a["k"], a["n"], a.get("kind", "bit")) for a in config["architectures"]]
    rows, histories = gradprobe(configs, config.get("seeds", [0]), train_set, epochs, hyper, test_set,
                                config.get("base_width", 16), workers)
    for (cfg, seed), hist in sorted(histories.items()):
        stem = model_name(*cfg).replace(" ", "_")
        (out_dir / f"{name}__{stem}__seed{seed}.csv").write_text(hist.to_csv())
    write_rows(out_dir / f"{name}__aggregate.csv", rows, PROBE_COLUMNS)
    return rows


def load_config(path) -> dict:
    return json.loads(Path(path).read_text())
