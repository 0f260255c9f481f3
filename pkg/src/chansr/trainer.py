"""Training, head fine-tuning, evaluation, ablation and interpolation baselines."""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .characteristics import DEFAULT_SPECS, KINDS, REGRESSION_TARGETS, TARGETS
from .dataset import (
    AUGMENTATIONS,
    SCALES,
    Dataset,
    downsample,
    lr_hr_pair,
    sanitize,
    split,
    transform_map,
)
from .losses import EvalReport, LossWeights, accuracy, composite_loss, regression_metrics, target_loss
from .model import Model, ModelConfig, build_model, forward, predict

log = logging.getLogger(__name__)

ABLATION_PRESETS = ("stl", "res", "da", "att")
ABLATION_LABELS = {"stl": "STL", "res": "+RES", "da": "+DA", "att": "+ATT"}


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss {value} at step {step}")
        self.step = step


class ScaleMismatchError(ValueError):
    pass


@contextlib.contextmanager
def thread_limit(deterministic: bool):
    """Cap BLAS threads: 1 in deterministic mode, else $CHANSR_THREADS when set."""
    from threadpoolctl import threadpool_limits

    env = os.environ.get("CHANSR_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is None:
        yield
        return
    with threadpool_limits(limits=limit):
        yield


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    patch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_halving_epochs: int = 100
    seed: int = 7
    deterministic: bool = False
    scale: int = 2
    ablation: str = "att"
    patches_per_scene: int = 1
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    stde_weight: float = 0.1
    ce_weight: float = 1.0
    finetune_epochs: int = 5
    model: dict = field(default_factory=dict)  # ModelConfig overrides (width, head_width, ...)

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if self.scale not in SCALES:
            raise ValueError(f"scale: must be one of {SCALES}")
        if self.patch_size % self.scale:
            raise ValueError(f"patch_size: {self.patch_size} not divisible by scale {self.scale}")
        if self.ablation not in ABLATION_PRESETS:
            raise ValueError(f"ablation: must be one of {ABLATION_PRESETS}")
        if self.batch_size < 1 or self.patches_per_scene < 1:
            raise ValueError("batch_size and patches_per_scene must be >= 1")

    @property
    def augment(self) -> bool:
        return self.ablation in ("da", "att")

    def model_config(self) -> ModelConfig:
        level = ABLATION_PRESETS.index(self.ablation)
        base = dict(
            scale=self.scale,
            seed=self.seed,
            use_residual=level >= 1,
            back_projection=level >= 1,
            use_attention=level >= 3,
        )
        base.update(self.model)
        return ModelConfig.from_dict(base)

    def loss_weights(self) -> LossWeights:
        return LossWeights(ce_weight=self.ce_weight, stde_weight=self.stde_weight)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: halved after every ``lr_halving_epochs``."""
        return self.lr * 0.5 ** ((epoch - 1) // self.lr_halving_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"{unknown[0]}: unknown train config field")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


# --------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: dict[str, ad.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros(p.shape) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape) for n, p in params.items()}
        self.t = 0

    def step(self, grads: dict[ad.Tensor, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new.flags.writeable = False
            p.data = new


# ---------------------------------------------------------- patch sampling

class PatchSampler:
    """Random HR crops (optionally dihedrally augmented) with their derived LR inputs."""

    def __init__(self, dataset: Dataset, indices: list[int], config: TrainConfig):
        self.specs = dataset.specs
        self.scenes = [
            {k: sanitize(dataset.samples[i].rasters[k], self.specs[k]) for k in KINDS} for i in indices
        ]
        self.config = config
        self.grid = dataset.grid_size
        if config.patch_size > self.grid:
            raise ValueError(f"patch_size {config.patch_size} exceeds grid {self.grid}")

    def __len__(self):
        return len(self.scenes)

    def crop(self, scene: int, aug: int, r0: int, c0: int) -> tuple[np.ndarray, np.ndarray]:
        p = self.config.patch_size
        name = AUGMENTATIONS[aug]
        rasters = {k: transform_map(v, name)[r0:r0 + p, c0:c0 + p] for k, v in self.scenes[scene].items()}
        return lr_hr_pair(rasters, self.config.scale, self.specs)

    def epoch_batches(self, rng: np.random.Generator):
        cfg = self.config
        order = np.concatenate([rng.permutation(len(self.scenes)) for _ in range(cfg.patches_per_scene)])
        slots = (self.grid - cfg.patch_size) // cfg.scale + 1
        draws = []
        for s in order:
            aug = int(rng.integers(len(AUGMENTATIONS))) if cfg.augment else 0
            r0, c0 = (rng.integers(slots, size=2) * cfg.scale).tolist()
            draws.append((int(s), aug, r0, c0))
        for i in range(0, len(draws), cfg.batch_size):
            pairs = [self.crop(*d) for d in draws[i:i + cfg.batch_size]]
            yield np.stack([lr for lr, _ in pairs]), np.stack([hr for _, hr in pairs])


def hr_targets(hr: np.ndarray) -> dict[str, np.ndarray]:
    """Split a normalized HR batch [N,7,H,W] into per-target maps."""
    return {t: hr[:, KINDS.index(t)] for t in TARGETS}


# ------------------------------------------------------------------ training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: dict[str, float]
    val_accuracy: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def to_csv(self, deterministic: bool = False) -> str:
        """Epoch table; wall-clock is left blank in deterministic mode so reruns are byte-identical."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss"] + [f"val_mae_{t}" for t in REGRESSION_TARGETS]
                   + ["val_acc_LOS", "lr", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss)] + [repr(r.val_mae[t]) for t in REGRESSION_TARGETS]
                       + [repr(r.val_accuracy), repr(r.lr), "" if deterministic else f"{r.seconds:.3f}"])
        return buf.getvalue()


@dataclass
class TrainResult:
    best: Model
    last: Model
    history: TrainHistory
    best_epoch: int
    step_losses: list[float]


def validation_score(report: EvalReport, specs=None) -> float:
    """Range-normalized mean regression MAE plus LOS error rate; lower is better."""
    specs = specs or DEFAULT_SPECS
    mae = np.mean([report.mae(t) / specs[t].span for t in REGRESSION_TARGETS])
    return float(mae + (1.0 - report.los_accuracy))


def _ensure_split(dataset: Dataset, config: TrainConfig) -> Dataset:
    if not dataset.splits:
        split(dataset, config.split_ratios, config.seed)
    for name in ("train", "val"):
        if not dataset.splits.get(name):
            raise ValueError(f"dataset split {name!r} is empty")
    return dataset


def train(
    config: TrainConfig,
    dataset: Dataset,
    model: Model | None = None,
    max_steps: int | None = None,
    validate: bool = True,
    progress: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Minimize the composite loss on random HR patches (LR derived by block reduction).

    ``max_steps`` stops early (used by short overfit runs); ``validate=False``
    skips per-epoch validation, in which case the last model is also "best".
    """
    _ensure_split(dataset, config)
    model = model or build_model(config.model_config())
    if model.config.scale != config.scale:
        raise ScaleMismatchError(f"model scale {model.config.scale} != train scale {config.scale}")
    model.set_trainable(None)
    sampler = PatchSampler(dataset, dataset.splits["train"], config)
    opt = Adam(model.params, config.beta1, config.beta2, config.adam_eps)
    weights = config.loss_weights()
    rng = np.random.default_rng([config.seed, 0x7A17])
    history = TrainHistory()
    best_state, best_score, best_epoch = model.state(), math.inf, 0
    step = 0
    step_losses: list[float] = []
    with thread_limit(config.deterministic):
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            lr = config.lr_at(epoch)
            losses = []
            for lr_in, hr in sampler.epoch_batches(rng):
                pred = forward(model, ad.Tensor(lr_in))
                loss = composite_loss(pred, hr_targets(hr), weights)
                value = loss.item()
                step += 1
                if not math.isfinite(value):
                    raise DivergenceError(step, value)
                opt.step(ad.backward(loss), lr)
                losses.append(value)
                step_losses.append(value)
                if max_steps is not None and step >= max_steps:
                    break
            if validate:
                report = evaluate(model, dataset, "val", config.scale)
                val_mae = {t: report.mae(t) for t in REGRESSION_TARGETS}
                val_acc = report.los_accuracy
                score = validation_score(report, dataset.specs)
            else:
                val_mae = {t: math.nan for t in REGRESSION_TARGETS}
                val_acc, score = math.nan, -epoch
            rec = EpochRecord(epoch, float(np.mean(losses)), val_mae, val_acc, lr, time.perf_counter() - t0)
            history.records.append(rec)
            if progress:
                progress(rec)
            log.info("epoch %d loss %.5f val PL MAE %.3f LOS acc %.4f", epoch, rec.train_loss,
                     val_mae["PL"], val_acc)
            if score < best_score:
                best_state, best_score, best_epoch = model.state(), score, epoch
            if max_steps is not None and step >= max_steps:
                break
    best = build_model(model.config, init=False)
    best.load_state(best_state)
    return TrainResult(best, model, history, best_epoch, step_losses)


@dataclass
class FinetuneResult:
    model: Model
    target: str
    mae_before: float
    mae_after: float
    history: list[float]


def _target_score(report: EvalReport, target: str) -> float:
    return 1.0 - report.los_accuracy if target == "LOS" else report.mae(target)


def finetune_heads(model: Model, dataset: Dataset, target: str, config: TrainConfig) -> FinetuneResult:
    """Optimize only ``head/<target>/*`` on that target's loss; everything else is frozen.

    Candidates are scored on the validation split after each epoch and the
    pre-fine-tuning head is a candidate too, so the returned head never scores
    worse on validation than the one it started from.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")
    _ensure_split(dataset, config)
    tuned = model.copy()
    prefix = f"head/{target}/"
    tuned.set_trainable((prefix,))
    trainable = tuned.trainable()
    opt = Adam(trainable, config.beta1, config.beta2, config.adam_eps)
    sampler = PatchSampler(dataset, dataset.splits["train"], config)
    weights = config.loss_weights()
    rng = np.random.default_rng([config.seed, 0xF17E, TARGETS.index(target)])
    with thread_limit(config.deterministic):
        before = _target_score(evaluate(tuned, dataset, "val", config.scale), target)
        best_state, best = {n: p.data for n, p in trainable.items()}, before
        scores = [before]
        for epoch in range(1, config.finetune_epochs + 1):
            for lr_in, hr in sampler.epoch_batches(rng):
                pred = forward(tuned, ad.Tensor(lr_in))
                loss = target_loss(pred, hr_targets(hr), target, weights)
                if not math.isfinite(loss.item()):
                    raise DivergenceError(epoch, loss.item())
                opt.step(ad.backward(loss), config.lr_at(epoch))
            score = _target_score(evaluate(tuned, dataset, "val", config.scale), target)
            scores.append(score)
            if score < best:
                best_state, best = {n: p.data for n, p in trainable.items()}, score
    for n, arr in best_state.items():
        tuned.params[n].data = arr
    tuned.set_trainable(None)
    return FinetuneResult(tuned, target, before, best, scores)


# ---------------------------------------------------------------- evaluation

Predictor = Callable[[dict[str, np.ndarray], int], dict[str, np.ndarray]]


def model_predictor(model: Model, specs=None) -> Predictor:
    specs = specs or DEFAULT_SPECS

    def run(rasters: dict[str, np.ndarray], scale: int) -> dict[str, np.ndarray]:
        lr_in, _ = lr_hr_pair(rasters, scale, specs)
        out = predict(model, lr_in[None])
        native = {t: specs[t].span * out[t][0] + specs[t].min for t in REGRESSION_TARGETS}
        native["LOS"] = out["LOS"][0]
        return native

    return run


def predict_split(source: Model | Predictor, dataset: Dataset, split_name: str, scale: int):
    """Native-unit predictions and sanitized ground truth for every scene in a split."""
    if isinstance(source, Model):
        if source.config.scale != scale:
            raise ScaleMismatchError(f"checkpoint scale {source.config.scale} != requested scale {scale}")
        source = model_predictor(source, dataset.specs)
    if split_name not in dataset.splits or not dataset.splits[split_name]:
        raise ValueError(f"split {split_name!r} is empty")
    out = []
    for sample in dataset.split_samples(split_name):
        gt = {k: sanitize(sample.rasters[k], dataset.specs[k]).astype(np.float64) for k in KINDS}
        out.append((source(gt, scale), gt))
    return out


def report_from_predictions(pairs, scale: int, specs=None) -> EvalReport:
    specs = specs or DEFAULT_SPECS
    rows = {}
    total = valid = 0
    for t in TARGETS:
        preds, gts, masks = [], [], []
        for pred, gt in pairs:
            preds.append(np.ravel(pred[t]))
            gts.append(np.ravel(gt[t]))
            masks.append(~specs[t].is_sentinel(np.ravel(gt[t])))
        p, g, m = np.concatenate(preds), np.concatenate(gts), np.concatenate(masks)
        if t == "LOS":
            rows[t] = {"accuracy": accuracy(p, g, m)}
        else:
            rows[t] = regression_metrics(p, g, m)
        total, valid = m.size, int(m.sum())
    return EvalReport(scale, rows, sample_count=len(pairs), valid_fraction=valid / total)


def evaluate(source: Model | Predictor, dataset: Dataset, split_name: str, scale: int) -> EvalReport:
    """Full-frame inference on one split; metrics in native units, rows ordered like TARGETS."""
    with ad.no_grad():
        return report_from_predictions(predict_split(source, dataset, split_name, scale), scale, dataset.specs)


# ----------------------------------------------------------------- baselines

def _cubic_weights(n_in: int, scale: int, a: float = -0.5) -> np.ndarray:
    """[n_in*scale, n_in] Catmull-Rom resampling matrix, pixel-centre aligned, edge-clamped."""
    n_out = n_in * scale
    x = (np.arange(n_out) + 0.5) / scale - 0.5
    base = np.floor(x).astype(int)
    m = np.zeros((n_out, n_in))
    for off in (-1, 0, 1, 2):
        idx = base + off
        d = np.abs(x - idx)
        w = np.where(
            d <= 1,
            (a + 2) * d**3 - (a + 3) * d**2 + 1,
            np.where(d < 2, a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a, 0.0),
        )
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return m


def baseline_interpolate(lr_map: np.ndarray, scale: int, method: str = "bicubic", kind: str | None = None) -> np.ndarray:
    lr_map = np.asarray(lr_map, dtype=np.float64)
    if kind == "LOS" and method != "nearest":
        raise ValueError("LOS is categorical; only nearest interpolation is allowed")
    if method == "nearest":
        return np.repeat(np.repeat(lr_map, scale, axis=0), scale, axis=1)
    if method == "bicubic":
        mr = _cubic_weights(lr_map.shape[0], scale)
        mc = _cubic_weights(lr_map.shape[1], scale)
        return mr @ lr_map @ mc.T
    raise ValueError(f"unknown interpolation method {method!r}")


def fill_sentinels(values: np.ndarray, invalid: np.ndarray) -> np.ndarray:
    """Replace invalid cells with their nearest valid neighbour's value."""
    if not invalid.any() or invalid.all():
        return values
    _, (ri, ci) = ndimage.distance_transform_edt(invalid, return_indices=True)
    return values[ri, ci]


def baseline_predictor(method: str = "bicubic", specs=None) -> Predictor:
    """Interpolation stand-in for learned SR; building cells are filled before interpolating."""
    specs = specs or DEFAULT_SPECS

    def run(rasters: dict[str, np.ndarray], scale: int) -> dict[str, np.ndarray]:
        out = {}
        for t in TARGETS:
            lr = downsample(rasters[t], scale, t, specs[t])
            lr = fill_sentinels(lr, specs[t].is_sentinel(lr))
            out[t] = baseline_interpolate(lr, scale, "nearest" if t == "LOS" else method, t)
        return out

    return run


# ------------------------------------------------------------------ ablation

@dataclass
class AblationRow:
    preset: str
    mae: dict[int, float]
    rmse: dict[int, float]


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def row(self, preset: str) -> AblationRow:
        return next(r for r in self.rows if r.preset == preset)

    def improvement(self, preset: str, metric: str, scale: int, reference: str = "stl") -> float:
        """Relative error reduction (percent) of ``preset`` against ``reference``."""
        ref = getattr(self.row(reference), metric)[scale]
        val = getattr(self.row(preset), metric)[scale]
        return 100.0 * (ref - val) / ref

    def to_csv(self) -> str:
        scales = sorted(self.rows[0].mae)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["row"]
        for metric in ("MAE", "RMSE"):
            header += [f"PL_{metric}_x{s}" for s in scales]
        for metric in ("MAE", "RMSE"):
            header += [f"gain_vs_STL_{metric}_x{s}" for s in scales]
        for metric in ("MAE", "RMSE"):
            header += [f"gain_vs_prev_{metric}_x{s}" for s in scales]
        w.writerow(header)
        # most complete model first
        for i in reversed(range(len(self.rows))):
            r = self.rows[i]
            prev = self.rows[i - 1].preset if i else r.preset
            cells = [ABLATION_LABELS[r.preset]]
            cells += [f"{r.mae[s]:.6g}" for s in scales] + [f"{r.rmse[s]:.6g}" for s in scales]
            for ref in ("stl", prev):
                for metric in ("mae", "rmse"):
                    cells += [f"{self.improvement(r.preset, metric, s, ref):+.2f}%" for s in scales]
            w.writerow(cells)
        return buf.getvalue()


def run_ablation(
    base: TrainConfig,
    dataset: Dataset,
    scales: tuple[int, ...] = (2,),
    progress: Callable[[str, int, EvalReport], None] | None = None,
    reuse: dict[tuple[str, int], TrainResult] | None = None,
) -> tuple[AblationTable, dict[tuple[str, int], TrainResult]]:
    """Train STL, +RES, +DA, +ATT on the same seed and split; score PL on the test split.

    ``reuse`` maps (preset, scale) to a finished run trained with the same
    base config, which is scored instead of being trained again.
    """
    _ensure_split(dataset, base)
    rows, runs = [], {}
    for preset in ABLATION_PRESETS:
        mae, rmse = {}, {}
        for s in scales:
            cfg = base.replace(ablation=preset, scale=s)
            result = (reuse or {}).get((preset, s))
            if result is None:
                result = train(cfg, dataset)
            report = evaluate(result.best, dataset, "test", s)
            mae[s], rmse[s] = report.rows["PL"]["MAE"], report.rows["PL"]["RMSE"]
            runs[(preset, s)] = result
            if progress:
                progress(preset, s, report)
        rows.append(AblationRow(preset, mae, rmse))
    return AblationTable(rows), runs
