"""SGD training loop with momentum, weight decay and plateau learning-rate decay."""
import copy
import csv
import io
import json
import logging
import math
import zipfile
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import config as cfg
from .data import SaliencyDataset
from .losses import FeatureNet, total_loss
from .metrics import evaluate_arrays
from .network import SFCN, backward, foreground_probability, init_params, to_nchw
from .reflection import MeanImage, compute_dataset_mean, reflect

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "reflect-sod-checkpoint"
CHECKPOINT_VERSION = 1
# fixed zip member timestamp keeps checkpoint bytes reproducible
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def sgd_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
             buffers: Dict[str, torch.Tensor], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0005):
    """In place: v <- momentum * v + grad + weight_decay * p;  p <- p - lr * v."""
    with torch.no_grad():
        for name, p in params.items():
            v = buffers.get(name)
            if v is None:
                v = buffers[name] = torch.zeros_like(p)
            v.mul_(momentum).add_(grads[name])
            if weight_decay:
                v.add_(p, alpha=weight_decay)
            p.sub_(v, alpha=lr)


class PlateauScheduler:
    """Decay the learning rate when the windowed mean loss stops improving.

    Every ``patience`` steps the mean loss of the latest window is compared with
    the previous window; a relative improvement below ``threshold`` multiplies
    the rate by ``factor``. After a decay the next window boundary is skipped.
    """

    def __init__(self, lr: float, patience: int = 50, factor: float = 0.9, threshold: float = 0.01):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.history = deque(maxlen=2 * patience)
        self.steps = 0
        self.last_decay = None
        self.decays = 0

    def step(self, loss: float) -> float:
        self.history.append(float(loss))
        self.steps += 1
        p = self.patience
        if self.steps % p or len(self.history) < 2 * p:
            return self.lr
        if self.last_decay is not None and self.steps - self.last_decay <= p:
            return self.lr
        hist = list(self.history)
        previous, latest = float(np.mean(hist[:p])), float(np.mean(hist[p:]))
        if previous - latest < self.threshold * abs(previous):
            self.lr *= self.factor
            self.last_decay = self.steps
            self.decays += 1
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "history": list(self.history), "steps": self.steps,
                "last_decay": self.last_decay, "decays": self.decays}

    def load_state_dict(self, state: dict):
        self.lr = state["lr"]
        self.history = deque(state["history"], maxlen=2 * self.patience)
        self.steps = state["steps"]
        self.last_decay = state["last_decay"]
        self.decays = state["decays"]


def plateau_scheduler(loss_history, lr: float, patience: int = 50, factor: float = 0.9,
                      threshold: float = 0.01) -> float:
    """Learning rate after replaying ``loss_history`` through a fresh scheduler."""
    sched = PlateauScheduler(lr, patience, factor, threshold)
    for loss in loss_history:
        sched.step(loss)
    return sched.lr


# --- checkpoints ---

def _array_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr, order="C"), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: dict):
    """Zip archive: ``meta.json`` plus one ``arrays/<name>.npy`` per tensor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION, arrays=sorted(arrays))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_DATE),
                    json.dumps(meta, indent=1, sort_keys=True))
        for name in sorted(arrays):
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", _ZIP_DATE), _array_bytes(arrays[name]))


def load_checkpoint(path):
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            arrays = {name: np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")),
                                                     allow_pickle=False)
                      for name in meta["arrays"]}
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return arrays, meta


def load_model_state(model: SFCN, arrays: Dict[str, np.ndarray]):
    """Copy arrays into the model, naming the first layer whose shape disagrees."""
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    if missing:
        raise CheckpointError(f"checkpoint lacks layer {missing[0]}")
    for name, tensor in state.items():
        if tuple(arrays[name].shape) != tuple(tensor.shape):
            raise CheckpointError(f"layer {name}: checkpoint shape {tuple(arrays[name].shape)} "
                                  f"!= model shape {tuple(tensor.shape)}")
    model.load_state_dict({k: torch.from_numpy(arrays[k].copy()).to(v.dtype) for k, v in state.items()})


def model_from_checkpoint(path, config: Optional[dict] = None):
    """Rebuild the model stored at ``path``; ``config`` overrides the stored config echo."""
    arrays, meta = load_checkpoint(path)
    config = cfg.apply_preset(config if config is not None else cfg.from_dict(meta["config"]))
    model = SFCN(cfg.model_config(config)).to(DTYPES[config["train"]["dtype"]])
    load_model_state(model, arrays)
    model.eval()
    mean = MeanImage("scalar-per-channel", np.array(meta["mean"]))
    return model, mean, config, meta


# --- training ---

@dataclass
class StepRecord:
    step: int
    lr: float
    total: float
    wbce: float
    sc: float
    s1: float


class Trainer:
    """Owns the model, optimizer state, scheduler and RNG for one training run."""

    def __init__(self, config: dict, dataset: SaliencyDataset, eval_dataset: Optional[SaliencyDataset] = None):
        self.raw_config = copy.deepcopy(config)
        self.config = cfg.apply_preset(config)
        train = self.config["train"]
        self.dtype = DTYPES[train["dtype"]]
        self.model_config = cfg.model_config(self.config)
        if tuple(dataset.size) != tuple(self.model_config.input_size):
            raise ValueError(f"dataset size {dataset.size} != model input {self.model_config.input_size}")
        self.weights = cfg.loss_weights(self.config)
        self.dataset, self.eval_dataset = dataset, eval_dataset
        self.seed = train["seed"]
        self.model = init_params(self.model_config, self.seed, self.dtype)
        self.featnet = FeatureNet(seed=self.weights.featnet_seed).to(self.dtype)
        refl = self.config["reflection"]
        if refl["mean_source"] == "dataset":
            self.mean = compute_dataset_mean(dataset.images)
        else:
            self.mean = MeanImage.constant(*refl["mean"])
        self.k = refl["k"]
        self.rng = np.random.default_rng(self.seed)
        self.buffers: Dict[str, torch.Tensor] = {}
        self.scheduler = PlateauScheduler(train["base_lr"], train["plateau_patience"],
                                          train["lr_decay_factor"], train["plateau_threshold"])
        self.step_count = 0
        self.log: List[StepRecord] = []

    @property
    def lr(self) -> float:
        return self.scheduler.lr

    def params(self) -> Dict[str, torch.nn.Parameter]:
        return dict(self.model.named_parameters())

    def sample_batch(self):
        train = self.config["train"]
        n = len(self.dataset)
        idx = self.rng.choice(n, size=min(train["batch_size"], n), replace=False)
        seeds = self.rng.integers(0, 2 ** 31, size=len(idx)) if train["augment"] else None
        return self.dataset.batch(idx, seeds)

    def loss_on(self, images: np.ndarray, masks: np.ndarray):
        pair = reflect(torch.from_numpy(images).to(self.dtype), self.mean, self.k)
        self.model.train()
        logits = self.model(to_nchw(pair.origin), to_nchw(pair.reflected))
        pred = foreground_probability(logits)
        gt = torch.from_numpy(masks).to(self.dtype)
        return total_loss(pred, gt, self.weights, self.featnet)

    def step(self) -> StepRecord:
        images, masks = self.sample_batch()
        loss, terms = self.loss_on(images, masks)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(
                f"non-finite loss {value} at step {self.step_count + 1} (lr={self.lr}, "
                f"terms={ {k: float(v.detach()) for k, v in terms.items()} })")
        grads = backward(loss, self.model)
        train = self.config["train"]
        sgd_step(self.params(), grads, self.buffers, self.lr, train["momentum"], train["weight_decay"])
        self.step_count += 1
        record = StepRecord(self.step_count, self.lr, value,
                            *(float(terms[k].detach()) for k in ("wbce", "sc", "s1")))
        self.scheduler.step(value)
        self.log.append(record)
        return record

    def run(self, steps: int, out_dir=None, eval_every: Optional[int] = None) -> List[StepRecord]:
        eval_every = eval_every or self.config["train"]["eval_every"]
        for _ in range(steps):
            record = self.step()
            if record.step % 50 == 0:
                log.info("step %d lr %.3g loss %.5f", record.step, record.lr, record.total)
            if out_dir is not None and record.step % eval_every == 0:
                self.save(Path(out_dir) / f"checkpoint_{record.step:06d}.ckpt")
                if self.eval_dataset is not None:
                    self.evaluate(self.eval_dataset, out_dir)
        return self.log

    @torch.no_grad()
    def predict(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode foreground probabilities for N x H x W x 3 images."""
        self.model.eval()
        pair = reflect(torch.from_numpy(images).to(self.dtype), self.mean, self.k)
        logits = self.model(to_nchw(pair.origin), to_nchw(pair.reflected))
        return foreground_probability(logits).double().numpy()

    def evaluate(self, dataset: SaliencyDataset, out_dir=None):
        preds = self.predict(np.stack(dataset.images))
        # quantise as the saved PNG maps would be
        preds = np.round(preds * 255) / 255
        report = evaluate_arrays(dict(zip(dataset.stems, preds)), dict(zip(dataset.stems, dataset.masks)))
        if out_dir is not None:
            path = Path(out_dir) / "eval_log.csv"
            new = not path.exists()
            with open(path, "a", newline="") as fh:
                writer = csv.writer(fh)
                if new:
                    writer.writerow(["step", "fmax", "mae", "smeasure"])
                writer.writerow([self.step_count, repr(report.f_max), repr(report.mae), repr(report.s_measure)])
        return report

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        for name, buf in self.buffers.items():
            arrays[f"momentum.{name}"] = buf.detach().cpu().numpy()
        return arrays

    def save(self, path):
        meta = {
            "config": self.raw_config,
            "seed": self.seed,
            "step": self.step_count,
            "scheduler": self.scheduler.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "mean": self.mean.values.tolist() if self.mean.mode == "scalar-per-channel" else None,
            "log": [list(vars(r).values()) for r in self.log],
        }
        save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def resume(cls, path, dataset: SaliencyDataset, eval_dataset: Optional[SaliencyDataset] = None) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        trainer = cls(cfg.from_dict(meta["config"]), dataset, eval_dataset)
        load_model_state(trainer.model, arrays)
        trainer.buffers = {k[len("momentum."):]: torch.from_numpy(v.copy())
                           for k, v in arrays.items() if k.startswith("momentum.")}
        trainer.scheduler.load_state_dict(meta["scheduler"])
        trainer.rng.bit_generator.state = meta["rng_state"]
        trainer.step_count = meta["step"]
        trainer.mean = MeanImage("scalar-per-channel", np.array(meta["mean"]))
        trainer.log = [StepRecord(*row) for row in meta["log"]]
        return trainer


def write_train_log(records: List[StepRecord], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "total", "wbce", "sc", "s1"])
        for r in records:
            writer.writerow([r.step, repr(r.lr), repr(r.total), repr(r.wbce), repr(r.sc), repr(r.s1)])


def train(config: dict, data_root, out_dir=None, steps: Optional[int] = None) -> Trainer:
    """Train for ``train.max_steps`` (or ``steps``) and write checkpoints and logs to ``out_dir``."""
    size = tuple(config["model"]["input_size"])
    dataset = SaliencyDataset(data_root, config["data"]["split"], size)
    eval_split = config["data"]["eval_split"]
    eval_dataset = SaliencyDataset(data_root, eval_split, size) if eval_split else None
    trainer = Trainer(config, dataset, eval_dataset)
    trainer.run(config["train"]["max_steps"] if steps is None else steps, out_dir)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        trainer.save(out_dir / "checkpoint.ckpt")
        write_train_log(trainer.log, out_dir / "train_log.csv")
    return trainer
