"""Mini-batch truncated-BPTT training, evaluation metrics, gate statistics.

The objective is the double mean over mini-batch sequences and time steps of
the Huber loss between predictions and normalised targets; the optimizer
steps once per truncation window while LSTM state values carry across the
cut. Targets are normalised by the motion envelopes (30 mm, 30 mm, 40 deg)
so a unit Huber delta treats the axes comparably; reported metrics are
always denormalised back to mm / degrees.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelParams, init_state, run_sequence, step_forward
from .synthdata import Dataset, PerturbSpec, SequenceRecord, apply_perturbation

__all__ = [
    "TrainConfig",
    "Adam",
    "EpochLog",
    "TrainResult",
    "TrainingDivergedError",
    "train",
    "eq4_loss",
    "EvalCondition",
    "MetricsReport",
    "evaluate",
    "GateHistogram",
    "collect_gate_histogram",
    "write_learning_curve",
    "model_grad_check",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_sequences: int = 8
    tbptt_window: int = 20
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    huber_delta: float = 1.0
    seed: int = 0
    target_scales: tuple[float, float, float] = (30.0, 30.0, 40.0)

    def validate(self, dataset_size: int | None = None) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_sequences < 1:
            raise ValueError(f"batch_sequences must be >= 1, got {self.batch_sequences}")
        if dataset_size is not None and dataset_size and self.batch_sequences > dataset_size:
            raise ValueError(
                f"batch_sequences {self.batch_sequences} exceeds the {dataset_size} training sequences"
            )
        if self.tbptt_window < 1:
            raise ValueError(f"tbptt_window must be >= 1, got {self.tbptt_window}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.huber_delta > 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")
        if len(self.target_scales) != 3 or any(s <= 0 for s in self.target_scales):
            raise ValueError(f"target_scales must be 3 positive values, got {self.target_scales}")


class TrainingDivergedError(RuntimeError):
    """Loss became NaN; carries enough context to locate the batch."""

    def __init__(self, epoch: int, step_range: tuple[int, int], sequences: list[str]):
        self.epoch = epoch
        self.step_range = step_range
        self.sequences = sequences
        super().__init__(
            f"NaN loss in epoch {epoch}, steps {step_range[0]}..{step_range[1] - 1}, "
            f"sequences: {', '.join(sequences)}"
        )


class Adam:
    """Adam with bias correction; one shared timestep, advanced per step() call."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    @classmethod
    def from_config(cls, params: dict[str, Tensor], cfg: TrainConfig) -> "Adam":
        return cls(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; did backward run?")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.asarray(float(self.t))}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        expected = {"step"} | {f"m.{n}" for n in self.params} | {f"v.{n}" for n in self.params}
        if set(state) != expected:
            raise ValueError(
                f"optimizer state keys mismatch: missing {sorted(expected - set(state))}, "
                f"unexpected {sorted(set(state) - expected)}"
            )
        self.t = int(state["step"])
        for name in self.params:
            self.m[name] = state[f"m.{name}"].reshape(self.m[name].shape).copy()
            self.v[name] = state[f"v.{name}"].reshape(self.v[name].shape).copy()


def eq4_loss(preds: np.ndarray, targets: np.ndarray, delta: float) -> float:
    """The training objective on plain arrays: the double mean over sequences
    and steps of the per-step (component-averaged) Huber loss. Tiling the
    sequence or batch axis leaves the value unchanged."""
    r = np.asarray(preds, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    a = np.abs(r)
    vals = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    return float(vals.mean())


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float | None
    mean_alpha: float | None
    mean_beta: float | None


@dataclass
class TrainResult:
    log: list[EpochLog]
    optimizer: Adam


def _stack_records(records: list[SequenceRecord], scales) -> dict:
    """Group sequences by length and pre-normalise frames and targets."""
    groups: dict[int, dict] = {}
    sc = np.asarray(scales, dtype=np.float64)
    for idx, rec in enumerate(records):
        t = rec.sample.targets.shape[0]
        groups.setdefault(t, {"indices": [], "img": [], "tac": [], "tgt": []})
        g = groups[t]
        g["indices"].append(idx)
        g["img"].append(rec.sample.frames_image.astype(np.float64) / 255.0)
        g["tac"].append(rec.sample.frames_tactile.astype(np.float64) / 255.0)
        g["tgt"].append(rec.sample.targets.astype(np.float64) / sc)
    for g in groups.values():
        g["img"] = np.stack(g["img"])
        g["tac"] = np.stack(g["tac"])
        g["tgt"] = np.stack(g["tgt"])
        g["pos"] = {rec_idx: k for k, rec_idx in enumerate(g["indices"])}
    return groups


def _batches(perm: np.ndarray, groups: dict, batch: int) -> Iterable[tuple[int, list[int]]]:
    """Chunk a permutation into equal-length mini-batches, preserving order."""
    by_t: dict[int, list[int]] = {}
    order: list[int] = []
    idx_to_t = {}
    for t, g in groups.items():
        for idx in g["indices"]:
            idx_to_t[idx] = t
    for idx in perm:
        t = idx_to_t[int(idx)]
        if t not in by_t:
            by_t[t] = []
            order.append(t)
        by_t[t].append(int(idx))
    for t in order:
        ids = by_t[t]
        for i in range(0, len(ids), batch):
            yield t, ids[i : i + batch]


def _describe(records: list[SequenceRecord], ids: list[int]) -> list[str]:
    return [f"#{i} ({records[i].sample.object.label}/{records[i].motion})" for i in ids]


def _window_mean(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    return ad.mul(total, 1.0 / len(losses)) if len(losses) > 1 else total


def _split_loss(params: ModelParams, groups: dict, delta: float) -> float | None:
    """Inference-mode Eq-4 loss over a stacked split; None when empty."""
    if not groups:
        return None
    num = 0.0
    den = 0
    with ad.no_grad():
        for g in groups.values():
            img, tac, tgt = g["img"], g["tac"], g["tgt"]
            n, t = tgt.shape[:2]
            frames_img = [Tensor(img[:, k]) for k in range(t)] if params.image_branch else None
            frames_tac = [Tensor(tac[:, k]) for k in range(t)] if params.tactile_branch else None
            run = run_sequence(frames_img, frames_tac, params, mode="infer")
            preds = np.stack([p.data for p in run.predictions], axis=1)
            num += eq4_loss(preds, tgt, delta) * n * t
            den += n * t
    return num / den if den else None


def train(
    params: ModelParams,
    dataset: Dataset,
    cfg: TrainConfig,
    optimizer: Adam | None = None,
    epoch_offset: int = 0,
) -> TrainResult:
    """Train in place; returns the per-epoch log and the optimizer.

    Shuffling draws from a stream keyed by (seed, epoch index), so a run
    resumed with ``epoch_offset`` reproduces the continuous run bit for bit.
    """
    train_records = dataset.split("train")
    cfg.validate(dataset_size=len(train_records))
    if not train_records:
        raise ValueError("dataset has no training sequences")
    if params.image_branch is None and params.tactile_branch is None:
        raise ValueError("model has no input branches")

    opt = optimizer or Adam.from_config(params.named_parameters(), cfg)
    groups = _stack_records(train_records, cfg.target_scales)
    val_groups = _stack_records(dataset.split("eval_known"), cfg.target_scales)
    has_gate = params.variant == "dgml"
    has_trace = params.variant in ("dgml", "no-gate")

    log: list[EpochLog] = []
    for epoch_i in range(cfg.epochs):
        epoch = epoch_offset + epoch_i
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7, epoch]))
        perm = rng.permutation(len(train_records))
        loss_num = 0.0
        loss_den = 0
        alpha_num = 0.0
        alpha_den = 0
        for t_len, batch_ids in _batches(perm, groups, cfg.batch_sequences):
            g = groups[t_len]
            rows = [g["pos"][i] for i in batch_ids]
            img_b = g["img"][rows]
            tac_b = g["tac"][rows]
            tgt_b = g["tgt"][rows]
            n = len(rows)
            state = init_state(params, n)
            for lo in range(0, t_len, cfg.tbptt_window):
                hi = min(lo + cfg.tbptt_window, t_len)
                step_losses = []
                for t in range(lo, hi):
                    img_t = Tensor(img_b[:, t]) if params.image_branch else None
                    tac_t = Tensor(tac_b[:, t]) if params.tactile_branch else None
                    pred, state, trace = step_forward(img_t, tac_t, state, params, "train")
                    step_losses.append(ad.huber_loss(pred, tgt_b[:, t], cfg.huber_delta))
                    if has_gate and trace is not None:
                        alpha_num += float(trace[0].sum())
                        alpha_den += trace[0].size
                loss = _window_mean(step_losses)
                if math.isnan(float(loss.data)):
                    raise TrainingDivergedError(epoch, (lo, hi), _describe(train_records, batch_ids))
                loss.backward()
                opt.step()
                opt.zero_grad()
                state = (state[0].detach(), state[1].detach())
                loss_num += float(loss.data) * n * (hi - lo)
                loss_den += n * (hi - lo)

        if has_gate:
            mean_alpha = alpha_num / alpha_den if alpha_den else None
            mean_beta = None if mean_alpha is None else 1.0 - mean_alpha
        elif has_trace:  # no-gate: fixed reliability pair
            mean_alpha = mean_beta = 1.0
        else:
            mean_alpha = mean_beta = None
        val_loss = _split_loss(params, val_groups, cfg.huber_delta)
        log.append(EpochLog(epoch, loss_num / loss_den, val_loss, mean_alpha, mean_beta))
    return TrainResult(log, opt)


def write_learning_curve(path, log: list[EpochLog]) -> None:
    """CSV with header epoch,train_loss,val_loss,mean_alpha,mean_beta."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "mean_alpha", "mean_beta"])
        for e in log:
            writer.writerow(
                [e.epoch, repr(e.train_loss)]
                + ["" if v is None else repr(v) for v in (e.val_loss, e.mean_alpha, e.mean_beta)]
            )


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalCondition:
    """What, if anything, degrades the inputs during evaluation."""

    kind: str = "normal"  # normal | mute-image | mute-tactile | noise
    variance: float = 0.0
    modality: str = "tactile"  # which modality noise lands on

    def __post_init__(self):
        if self.kind not in ("normal", "mute-image", "mute-tactile", "noise"):
            raise ValueError(f"unknown condition {self.kind!r}")
        if self.kind == "noise" and self.variance < 0:
            raise ValueError(f"noise variance must be >= 0, got {self.variance}")

    @classmethod
    def parse(cls, text: str) -> "EvalCondition":
        if text in ("normal", "mute-image", "mute-tactile"):
            return cls(kind=text)
        raise ValueError(f"unknown condition {text!r}; expected normal|mute-image|mute-tactile")

    def perturbation(self) -> PerturbSpec | None:
        if self.kind == "normal":
            return None
        if self.kind == "mute-image":
            return PerturbSpec("image", "mute")
        if self.kind == "mute-tactile":
            return PerturbSpec("tactile", "mute")
        if self.variance == 0.0:
            return None
        return PerturbSpec(self.modality, "gaussian-noise", self.variance)

    def describe(self) -> str:
        if self.kind == "noise":
            return f"noise({self.modality}, var={self.variance:g})"
        return self.kind


@dataclass
class MetricsReport:
    """Mean absolute errors (mm / degrees) plus gate means for one split."""

    split: str
    condition: str
    acc_trans: float
    acc_rot: float
    mean_alpha: float | None
    mean_beta: float | None
    n_sequences: int
    n_steps: int

    def to_dict(self) -> dict:
        return {
            "acc_trans_mm": self.acc_trans,
            "acc_rot_deg": self.acc_rot,
            "mean_alpha": self.mean_alpha,
            "mean_beta": self.mean_beta,
            "n_sequences": self.n_sequences,
            "n_steps": self.n_steps,
        }


def _check_condition(params: ModelParams, condition: EvalCondition) -> None:
    spec = condition.perturbation()
    if spec is None:
        return
    if spec.modality == "image" and params.image_branch is None:
        raise ValueError(f"condition {condition.describe()} targets the image branch, absent in {params.variant}")
    if spec.modality == "tactile" and params.tactile_branch is None:
        raise ValueError(f"condition {condition.describe()} targets the tactile branch, absent in {params.variant}")


def _forward_records(
    params: ModelParams,
    records: list[SequenceRecord],
    condition: EvalCondition,
    seed: int,
    scales,
    chunk: int = 16,
    gate_override: float | None = None,
):
    """Inference over a record list; yields (record, preds_denorm, alphas|None)."""
    spec = condition.perturbation()
    sc = np.asarray(scales, dtype=np.float64)
    for start in range(0, len(records), chunk):
        part = records[start : start + chunk]
        samples = []
        for offset, rec in enumerate(part):
            if spec is None:
                samples.append(rec.sample)
            else:
                child = int(np.random.SeedSequence([seed, start + offset]).generate_state(1, np.uint64)[0])
                samples.append(apply_perturbation(rec.sample, spec, child))
        t_lens = {s.targets.shape[0] for s in samples}
        for t_len in sorted(t_lens):
            idxs = [i for i, s in enumerate(samples) if s.targets.shape[0] == t_len]
            img = np.stack([samples[i].frames_image for i in idxs]).astype(np.float64) / 255.0
            tac = np.stack([samples[i].frames_tactile for i in idxs]).astype(np.float64) / 255.0
            with ad.no_grad():
                frames_img = [Tensor(img[:, k]) for k in range(t_len)] if params.image_branch else None
                frames_tac = [Tensor(tac[:, k]) for k in range(t_len)] if params.tactile_branch else None
                run = run_sequence(frames_img, frames_tac, params, mode="infer", gate_override=gate_override)
            preds = np.stack([p.data for p in run.predictions], axis=1) * sc
            alphas = np.stack(run.alphas, axis=1) if run.alphas else None  # [n, T]
            for j, i in enumerate(idxs):
                yield part[i], preds[j], (alphas[j] if alphas is not None else None)


def evaluate(
    params: ModelParams,
    dataset: Dataset,
    split: str = "eval_known",
    condition: EvalCondition = EvalCondition(),
    seed: int = 0,
    target_scales: tuple[float, float, float] = (30.0, 30.0, 40.0),
    return_details: bool = False,
):
    """Mean per-step translation and rotation errors over a split.

    acc_trans averages |dx - dx'| + |dy - dy'| over every step of every
    sequence; acc_rot averages |dtheta - dtheta'|. Sums use math.fsum so the
    reduction order cannot perturb the result.
    """
    records = dataset.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    _check_condition(params, condition)

    trans_terms: list[float] = []
    rot_terms: list[float] = []
    alpha_values: list[float] = []
    details = []
    for rec, preds, alphas in _forward_records(params, records, condition, seed, target_scales):
        target = rec.sample.targets.astype(np.float64)
        err = np.abs(target - preds)
        trans_terms.extend((err[:, 0] + err[:, 1]).tolist())
        rot_terms.extend(err[:, 2].tolist())
        if alphas is not None:
            alpha_values.extend(alphas.tolist())
        if return_details:
            details.append(
                {"object": rec.sample.object.label, "motion": rec.motion, "pred": preds, "target": target}
            )

    n_steps = len(trans_terms)
    acc_trans = math.fsum(trans_terms) / n_steps
    acc_rot = math.fsum(rot_terms) / n_steps
    if params.variant == "dgml":
        mean_alpha = math.fsum(alpha_values) / len(alpha_values)
        mean_beta = 1.0 - mean_alpha
    elif params.variant == "no-gate":
        mean_alpha = mean_beta = 1.0
    else:
        mean_alpha = mean_beta = None
    report = MetricsReport(
        split=split,
        condition=condition.describe(),
        acc_trans=acc_trans,
        acc_rot=acc_rot,
        mean_alpha=mean_alpha,
        mean_beta=mean_beta,
        n_sequences=len(records),
        n_steps=n_steps,
    )
    return (report, details) if return_details else report


@dataclass
class GateHistogram:
    """Distribution of per-step image reliability values over [0, 1]."""

    edges: np.ndarray  # bins + 1 edges
    counts: np.ndarray  # int counts, summing to the number of evaluated steps
    per_object: dict[str, np.ndarray] | None = None


def collect_gate_histogram(
    params: ModelParams,
    dataset: Dataset,
    split: str = "eval_known",
    bins: int = 20,
    group_by_object: bool = False,
    condition: EvalCondition = EvalCondition(),
    seed: int = 0,
    gate_override: float | None = None,
) -> GateHistogram:
    """Bin every per-step alpha produced while inferring over a split."""
    if params.variant != "dgml":
        raise ValueError(f"gate histograms need the dgml variant, got {params.variant!r}")
    records = dataset.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    _check_condition(params, condition)

    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros(bins, dtype=np.int64)
    per_object: dict[str, np.ndarray] = {}
    for rec, _, alphas in _forward_records(params, records, condition, seed, (1.0, 1.0, 1.0),
                                           gate_override=gate_override):
        hist, _ = np.histogram(alphas, bins=bins, range=(0.0, 1.0))
        counts += hist
        if group_by_object:
            label = rec.sample.object.label
            per_object.setdefault(label, np.zeros(bins, dtype=np.int64))
            per_object[label] += hist
    return GateHistogram(edges, counts, per_object if group_by_object else None)


# ---------------------------------------------------------------------------
# end-to-end gradient checking


def model_grad_check(
    params: ModelParams,
    steps: int = 2,
    batch: int = 2,
    eps: float = 1e-5,
    samples_per_tensor: int | None = 50,
    seed: int = 0,
    huber_delta: float = 1.0,
    _corrupt: str | None = None,
) -> ad.GradCheckReport:
    """Finite-difference check of the full sequence loss w.r.t. every parameter.

    Runs ``steps`` time steps of random frames in training mode. Batch-norm
    running statistics are restored before every forward evaluation so the
    repeated forwards the finite differences need stay deterministic.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    profile = params.profile

    def frames(hw):
        return [Tensor(rng.uniform(0.0, 1.0, size=(batch, 1, *hw))) for _ in range(steps)]

    frames_img = frames(profile.image_hw) if params.image_branch else None
    frames_tac = frames(profile.tactile_hw) if params.tactile_branch else None
    targets = [rng.uniform(-1.0, 1.0, size=(batch, 3)) for _ in range(steps)]

    bn_states = []
    for branch in (params.image_branch, params.tactile_branch):
        if branch is None:
            continue
        for blk in branch.blocks:
            bn_states.append((blk.bn, blk.bn.running_mean.copy(), blk.bn.running_var.copy()))

    def forward() -> Tensor:
        for bn, mean0, var0 in bn_states:
            bn.running_mean = mean0.copy()
            bn.running_var = var0.copy()
        run = run_sequence(frames_img, frames_tac, params, mode="train", tbptt_window=10**9)
        losses = [ad.huber_loss(pred, tgt, huber_delta) for pred, tgt in zip(run.predictions, targets)]
        return _window_mean(losses)

    return ad.grad_check(
        forward, params.named_parameters(), eps=eps, samples_per_tensor=samples_per_tensor,
        seed=seed, _corrupt=_corrupt,
    )
