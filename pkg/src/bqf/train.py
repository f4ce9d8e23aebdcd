"""Training harness: configuration, the alternating training loop, evaluation
probes, and run artifacts (metrics.csv, summary.json, final.bqf).

One training step:

  1. binarized layers produce W_q from their shadow weights (graph-connected),
     the network computes the task loss, and one reverse sweep populates every
     gradient;
  2. the task optimizer updates all ordinary parameters; for the meta
     quantizer, its parameters take a step from the task-gradient path and
     the shadow weights take a plain eta-step from the end-to-end gradient
     (other binarizers train their shadow weights with the task optimizer);
  3. with a nonzero sparsity weight, each layer's quantizer then takes one
     dedicated-optimizer step against the sparsity objective (strict
     alternation, task step then regularizer step).

Runs are deterministic for a fixed config: one seeded generator drives
initialization, batch order, and augmentation.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bqf import checkpoint as ckpt
from bqf import tensor as T
from bqf.binarize import BinarizerKind, binarize_weights
from bqf.data import DatasetHandle, augment_batch, epoch_batches, load_cifar10, load_mnist
from bqf.metrics import MetricsRecord, MetricsWriter, saturation_stats
from bqf.network import Network, discretize_model, evaluate, masked_binarized_loss
from bqf.optim import OPTIMIZER_KINDS, make_optimizer
from bqf.quantnet import (RegularizerState, regularizer_step, sparsity_objective,
                          update_shadow_weights)

BINARIZER_NAMES = {
    "none": None,
    "sign_ste": BinarizerKind.SignSTE,
    "xnor": BinarizerKind.XnorScaled,
    "tanh": BinarizerKind.SelfBinarizingTanh,
    "quantnet": BinarizerKind.QuantNetMeta,
}


class ConfigError(ValueError):
    """Bad key or value in a training configuration."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class TrainingConfig:
    network: str = "mlp_mnist"
    dataset: str = "mnist"              # mnist | cifar10
    dataset_dir: str = ""
    binarizer: str = "quantnet"         # none | sign_ste | xnor | tanh | quantnet
    optimizer: str = "sgdm"
    task_lr: float = 0.1
    quantnet_lr: float = 1e-3           # eta: plain step size for shadow weights
    theta_lr: float = 1e-3              # meta-optimizer lr on the task-gradient path
    reg_lr: float = 1e-3                # dedicated regularizer-optimizer lr
    lam: float = 1e-4                   # sparsity objective weight (config key: lambda)
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    deterministic: bool = True
    train_shadow_weights: bool = True
    activation_bits: int = 0            # 0 = full-precision activations
    binarize_all_layers: bool = False
    warm_start: bool = True
    xnor_per_filter: bool = True
    lr_schedule: str = "constant"       # constant | step (x0.1 at 50% and 75%)
    augment: bool = False
    subset_train: int = 0               # 0 = use the full split
    subset_test: int = 0
    dominance_k: float = 0.7
    train_eval_samples: int = 4096

    def validate(self) -> None:
        if self.binarizer not in BINARIZER_NAMES:
            raise ConfigError(f"unknown binarizer {self.binarizer!r}")
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.lr_schedule not in ("constant", "step"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        for name in ("task_lr", "quantnet_lr", "theta_lr", "reg_lr",
                     "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 <= self.dominance_k <= 1.0:
            raise ConfigError("dominance_k must be in [0, 1]")
        if self.activation_bits < 0:
            raise ConfigError("activation_bits must be >= 0")


_KEY_ALIASES = {"lambda": "lam"}
_FIELD_BY_KEY = {**{f.name: f for f in dataclasses.fields(TrainingConfig)}}
_CONFIG_KEYS = {("lambda" if f.name == "lam" else f.name): f.name
                for f in dataclasses.fields(TrainingConfig)}


def _parse_value(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("on", "true", "1", "yes"):
            return True
        if low in ("off", "false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean {raw!r} for key {field.name}")
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw.strip()


def parse_config(text: str) -> TrainingConfig:
    """Parse flat key=value text ('#' comments allowed); unknown keys are errors."""
    cfg = TrainingConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        field_name = _CONFIG_KEYS[key]
        field = _FIELD_BY_KEY[field_name]
        setattr(cfg, field_name, _parse_value(field, raw))
    cfg.validate()
    return cfg


def config_to_text(cfg: TrainingConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainingConfig):
        key = "lambda" if f.name == "lam" else f.name
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "on" if v else "off"
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: TrainingConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["lambda"] = d.pop("lam")
    return d


def config_from_dict(d: dict) -> TrainingConfig:
    d = dict(d)
    if "lambda" in d:
        d["lam"] = d.pop("lambda")
    cfg = TrainingConfig(**d)
    cfg.validate()
    return cfg


def load_dataset(cfg: TrainingConfig) -> DatasetHandle:
    if cfg.dataset == "mnist":
        data = load_mnist(cfg.dataset_dir)
        if cfg.subset_train:
            data.train_x = data.train_x[:cfg.subset_train]
            data.train_y = data.train_y[:cfg.subset_train]
        if cfg.subset_test:
            data.test_x = data.test_x[:cfg.subset_test]
            data.test_y = data.test_y[:cfg.subset_test]
        return data
    return load_cifar10(cfg.dataset_dir, subset_train=cfg.subset_train,
                        subset_test=cfg.subset_test)


class Trainer:
    """Owns one training run: network, optimizers, loop, and probes."""

    def __init__(self, cfg: TrainingConfig, data: DatasetHandle):
        cfg.validate()
        self.cfg = cfg
        self.data = data
        self.rng = np.random.default_rng(cfg.seed)
        kind = BINARIZER_NAMES[cfg.binarizer]
        self.net = Network.build(cfg.network, binarizer=kind, rng=self.rng,
                                 binarize_all=cfg.binarize_all_layers,
                                 activation_bits=cfg.activation_bits,
                                 warm_start=cfg.warm_start)
        for st in self.net.binarized.values():
            st.per_filter_scale = cfg.xnor_per_filter
        self.is_meta = kind is BinarizerKind.QuantNetMeta
        task_params = self.net.task_params()
        if not self.is_meta:
            task_params = task_params + self.net.shadow_params()
        self.task_opt = make_optimizer(cfg.optimizer, task_params, cfg.task_lr)
        self.meta_opt = None
        self.reg_states: dict[int, RegularizerState] = {}
        if self.is_meta:
            self.meta_opt = make_optimizer(cfg.optimizer, self.net.quantnet_params(),
                                           cfg.theta_lr)
            for i, qn in self.net.quantnets().items():
                self.reg_states[i] = RegularizerState(
                    lam=cfg.lam,
                    optimizer=make_optimizer(cfg.optimizer, qn.params(), cfg.reg_lr))
        self.base_task_lr = cfg.task_lr
        self.base_eta = cfg.quantnet_lr
        self.eta = cfg.quantnet_lr
        self.step_count = 0

    # -- single step -------------------------------------------------------

    def train_step(self, xb: np.ndarray, yb: np.ndarray) -> tuple[float, float]:
        """One task step (plus the alternating regularizer step); returns
        (task loss, wall milliseconds)."""
        t0 = time.perf_counter()
        self.task_opt.zero_grad()
        if self.meta_opt is not None:
            self.meta_opt.zero_grad()
        for st in self.net.binarized.values():
            st.W.zero_grad()
        loss = self.net.loss(xb, yb, "train")
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step_count} "
                f"(binarizer={self.cfg.binarizer}, lr={self.task_opt.lr})")
        T.backward(loss)
        self.task_opt.step()
        if self.is_meta:
            self.meta_opt.step()
            if self.cfg.train_shadow_weights:
                for st in self.net.binarized.values():
                    if st.W.grad is not None:
                        update_shadow_weights(st.W, self.eta, st.W.grad)
            if self.cfg.lam > 0:
                for i, st in sorted(self.net.binarized.items()):
                    regularizer_step(st.meta, st.W, self.reg_states[i])
        elif self.cfg.binarizer == "sign_ste":
            for st in self.net.binarized.values():
                np.clip(st.W.data, -1.0, 1.0, out=st.W.data)
        self.step_count += 1
        return value, (time.perf_counter() - t0) * 1000.0

    # -- probes --------------------------------------------------------------

    def regularizer_value(self) -> float:
        total = 0.0
        for st in self.net.binarized.values():
            wq = binarize_weights(st)
            total += float(sparsity_objective(wq.detach()).data)
        return total

    def dominance_ratio(self) -> float:
        if not self.net.binarized:
            return 1.0
        n = min(256, len(self.data.test_x))
        try:
            full, masked, _, _ = masked_binarized_loss(
                self.net, self.cfg.dominance_k,
                self.data.test_x[:n], self.data.test_y[:n])
        except ZeroDivisionError:
            return float("nan")
        return masked / full

    def epoch_record(self, epoch: int, task_loss: float, step_ms: float) -> MetricsRecord:
        cfg = self.cfg
        n_eval = min(cfg.train_eval_samples, len(self.data.train_x))
        train_acc = evaluate(self.net, self.data.train_x[:n_eval],
                             self.data.train_y[:n_eval])
        test_acc = evaluate(self.net, self.data.test_x, self.data.test_y)
        disc = discretize_model(self.net)
        test_acc_d = evaluate(disc, self.data.test_x, self.data.test_y)
        _, saturation = saturation_stats(self.net)
        return MetricsRecord(
            epoch=epoch, task_loss=task_loss, reg_loss=self.regularizer_value(),
            train_acc=train_acc, test_acc=test_acc, test_acc_discretized=test_acc_d,
            discretization_gap=test_acc - test_acc_d,
            saturation_fraction=saturation,
            dominance_ratio=self.dominance_ratio(),
            step_time_ms=step_ms)

    # -- full run ---------------------------------------------------------------

    def _schedule(self, epoch: int) -> None:
        if self.cfg.lr_schedule != "step":
            return
        factor = 1.0
        if epoch >= int(np.ceil(0.75 * self.cfg.epochs)):
            factor = 0.01
        elif epoch >= int(np.ceil(0.5 * self.cfg.epochs)):
            factor = 0.1
        self.task_opt.lr = self.base_task_lr * factor
        self.eta = self.base_eta * factor

    def run(self, out_dir=None) -> list[MetricsRecord]:
        cfg = self.cfg
        t_start = time.perf_counter()
        writer = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            writer = MetricsWriter(out_dir / "metrics.csv", cfg.deterministic)
        baseline_n = min(cfg.batch_size, len(self.data.train_x))
        base_loss = float(self.net.loss(self.data.train_x[:baseline_n],
                                        self.data.train_y[:baseline_n], "eval").data)
        records = [self.epoch_record(0, base_loss, 0.0)]
        if writer:
            writer.append(records[0])
        n = len(self.data.train_x)
        for epoch in range(1, cfg.epochs + 1):
            self._schedule(epoch - 1)
            losses, times = [], []
            for idx in epoch_batches(n, cfg.batch_size, self.rng):
                xb = self.data.train_x[idx]
                yb = self.data.train_y[idx]
                if cfg.augment:
                    xb = augment_batch(xb, self.rng)
                loss, ms = self.train_step(xb, yb)
                losses.append(loss)
                times.append(ms)
            rec = self.epoch_record(epoch, float(np.mean(losses)), float(np.mean(times)))
            records.append(rec)
            if writer:
                writer.append(rec)
        if out_dir is not None:
            wall = time.perf_counter() - t_start
            (out_dir / "summary.json").write_text(
                _summary_json(cfg, records, wall))
            self.save(out_dir / "final.bqf", epoch=cfg.epochs,
                      metrics_tail=dataclasses.asdict(records[-1]))
        return records

    # -- checkpointing --------------------------------------------------------------

    def save(self, path, epoch: int, metrics_tail: dict | None = None) -> Path:
        tensors: dict[str, np.ndarray] = {}
        for name, p in self.net.named_params().items():
            tensors[f"param:{name}"] = p.data
        for name, b in self.net.named_buffers().items():
            tensors[f"buffer:{name}"] = b
        for prefix, opt in self._optimizers():
            for key, arr in opt.state_dict().items():
                tensors[f"opt:{prefix}:{key}"] = np.asarray(arr)
        meta = {"config": config_dict(self.cfg), "discretized": False,
                "metrics_tail": metrics_tail or {}}
        return ckpt.save_checkpoint(path, tensors=tensors, meta=meta,
                                    epoch=epoch, seed=self.cfg.seed)

    def _optimizers(self):
        out = [("task", self.task_opt)]
        if self.meta_opt is not None:
            out.append(("meta", self.meta_opt))
            for i, st in sorted(self.reg_states.items()):
                out.append((f"reg{i}", st.optimizer))
        return out


def _summary_json(cfg: TrainingConfig, records: list[MetricsRecord], wall: float) -> str:
    import json
    return json.dumps({
        "config": config_dict(cfg),
        "final": dataclasses.asdict(records[-1]),
        "epochs": len(records) - 1,
        "wall_time_s": wall,
    }, indent=2, sort_keys=True) + "\n"


def run_training(cfg: TrainingConfig, data: DatasetHandle | None = None,
                 out_dir=None) -> tuple[list[MetricsRecord], Trainer]:
    """Build a Trainer for cfg (loading the dataset if not supplied), run it,
    and return (records, trainer)."""
    if data is None:
        data = load_dataset(cfg)
    trainer = Trainer(cfg, data)
    records = trainer.run(out_dir=out_dir)
    return records, trainer


# -- checkpoint restoration ------------------------------------------------------


def network_from_checkpoint(path) -> tuple[Network, TrainingConfig, ckpt.Checkpoint]:
    """Rebuild a Network (and its config) from a checkpoint file."""
    cp = ckpt.load_checkpoint(path)
    cfg = config_from_dict(cp.meta["config"])
    kind = None if cp.meta.get("discretized") else BINARIZER_NAMES[cfg.binarizer]
    net = Network.build(cfg.network, binarizer=kind,
                        rng=np.random.default_rng(cfg.seed),
                        binarize_all=cfg.binarize_all_layers,
                        activation_bits=cfg.activation_bits,
                        warm_start=cfg.warm_start)
    params = net.named_params()
    buffers = net.named_buffers()
    for name, arr in cp.tensors.items():
        if name.startswith("param:"):
            key = name[len("param:"):]
            if key not in params:
                raise ckpt.CheckpointError(f"checkpoint param {key!r} not in network")
            params[key].data[:] = arr
        elif name.startswith("buffer:"):
            key = name[len("buffer:"):]
            if key not in buffers:
                raise ckpt.CheckpointError(f"checkpoint buffer {key!r} not in network")
            buffers[key][:] = arr
    return net, cfg, cp


def save_discretized(path, network: Network, cfg: TrainingConfig, epoch: int,
                     seed: int) -> Path:
    """Write a fixed-point model (no quantizers, no shadow weights)."""
    disc = discretize_model(network)
    tensors: dict[str, np.ndarray] = {}
    for name, p in disc.named_params().items():
        tensors[f"param:{name}"] = p.data
    for name, b in disc.named_buffers().items():
        tensors[f"buffer:{name}"] = b
    meta = {"config": config_dict(cfg), "discretized": True, "metrics_tail": {}}
    return ckpt.save_checkpoint(path, tensors=tensors, meta=meta, epoch=epoch, seed=seed)
