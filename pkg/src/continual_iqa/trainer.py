"""Per-task training: the shared regressor loop, replay planning and the
split-and-merge pipeline (merge: single head with pseudo replay; split:
conditional GAN, then per-distortion auxiliary heads)."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from . import losses as L
from .metrics import UndefinedCorrelation, srcc
from .models import (
    ModelBundle,
    SingleHeadRegressor,
    build_bundle,
    extract_features,
    register_task_heads,
    snapshot,
)
from .seeding import derive_seed, torch_generator
from .tasks import AuditedStream, SampleSet, crop_for_phase

log = logging.getLogger(__name__)

QUALITY_BINS: tuple[tuple[float, float], ...] = ((0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0))
REPLAY_STRATEGIES = ("random", "qua", "dist", "qua_and_dist")
ABLATIONS = ("no_split_merge", "no_fd", "no_pr")


@dataclass(frozen=True)
class TrainSchedule:
    epochs_single: int = 70
    epochs_gan: int = 500
    epochs_multi: int = 70
    batch_regression: int = 48
    batch_gan: int = 128
    lr_base: float = 1e-4
    lr_extractor_novel: float = 1e-6
    lr_gan: float = 1e-4
    early_stop_min_epoch: int = 15
    gan_augmentation_factor: int = 10
    augmentation_jitter: float = 0.05
    gan_lr_decay: str = "none"  # or "linear": anneal the GAN learning rate to 0
    gan_ema: float = 0.0  # generator weight averaging decay; 0 disables
    gan_r1: float = 0.0  # gradient penalty on real discriminator logits; 0 disables
    gan_beta1: float = 0.5

    def __post_init__(self) -> None:
        if self.gan_lr_decay not in ("none", "linear"):
            raise ValueError("gan_lr_decay must be 'none' or 'linear'")
        if not 0.0 <= self.gan_ema < 1.0:
            raise ValueError("gan_ema must lie in [0, 1)")
        if self.gan_r1 < 0:
            raise ValueError("gan_r1 must be non-negative")
        if not 0.0 <= self.gan_beta1 < 1.0:
            raise ValueError("gan_beta1 must lie in [0, 1)")
        for name, value in vars(self).items():
            if name in ("gan_lr_decay", "gan_ema", "gan_r1", "gan_beta1"):
                continue
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.early_stop_min_epoch >= self.epochs_single:
            raise ValueError("early_stop_min_epoch must be smaller than epochs_single")


@dataclass(frozen=True)
class MethodConfig:
    """Everything a learner needs besides the data."""

    schedule: TrainSchedule = TrainSchedule()
    weights: L.LossWeights = L.LossWeights()
    replay_strategy: str = "qua_and_dist"
    buffer_size: int = 1400
    quality_assignment: str = "text"  # or "printed"
    adversarial_sign: str = "standard"  # or "printed"
    validation: str = "current"  # or "pooled_seen"
    backbone: str = "mlp"
    d_in: int = 16
    pretrained: bool = False
    lambda_ewc: float = 5000.0
    lambda_online_ewc: float = 5000.0
    gamma: float = 1.0
    lambda_si: float = 100.0
    xi: float = 0.1

    def __post_init__(self) -> None:
        if self.replay_strategy not in REPLAY_STRATEGIES:
            raise ValueError(f"unknown replay strategy {self.replay_strategy!r}")
        if self.quality_assignment not in ("text", "printed"):
            raise ValueError("quality_assignment must be 'text' or 'printed'")
        if self.adversarial_sign not in ("standard", "printed"):
            raise ValueError("adversarial_sign must be 'standard' or 'printed'")
        if self.validation not in ("current", "pooled_seen"):
            raise ValueError("validation must be 'current' or 'pooled_seen'")


# ---------------------------------------------------------------- replay plans

@dataclass
class ReplayPlan:
    strategy: str
    buffer_size: int
    bins: tuple[tuple[float, float], ...]
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def conditions(self) -> list[tuple[int, float]]:
        return list(zip(self.ids.tolist(), self.scores.tolist()))


def plan_replay(strategy: str, buffer_size: int, seen_distortions: Sequence[int],
                bins: Sequence[tuple[float, float]] = QUALITY_BINS, rng: np.random.Generator | None = None) -> ReplayPlan:
    """Allocate ``(distortion, quality)`` generation conditions for one batch.

    Fixed allocations are floored; any remainder of the buffer is dropped.
    """
    seen = np.asarray(list(seen_distortions), dtype=np.int64)
    if seen.size == 0:
        raise ValueError("replay needs at least one previously seen distortion")
    rng = rng or np.random.default_rng()
    bins = tuple(tuple(b) for b in bins)
    m_pre, n_bins = len(seen), len(bins)

    def in_bin(b, n):
        lo, hi = bins[b]
        return rng.uniform(lo, hi, size=n)

    if strategy == "random":
        ids = rng.choice(seen, size=buffer_size)
        scores = rng.uniform(0.0, 1.0, size=buffer_size)
    elif strategy == "qua":
        per = buffer_size // n_bins
        ids = rng.choice(seen, size=per * n_bins)
        scores = np.concatenate([in_bin(b, per) for b in range(n_bins)])
    elif strategy == "dist":
        per = buffer_size // m_pre
        ids = np.repeat(seen, per)
        scores = rng.uniform(0.0, 1.0, size=per * m_pre)
    elif strategy == "qua_and_dist":
        per = buffer_size // m_pre // n_bins
        ids = np.repeat(seen, per * n_bins)
        scores = np.concatenate([in_bin(b, per) for _ in seen for b in range(n_bins)]) if per else np.zeros(0)
    else:
        raise ValueError(f"unknown replay strategy {strategy!r}; choose from {REPLAY_STRATEGIES}")
    if len(ids) == 0:
        raise ValueError(f"buffer of {buffer_size} is too small for strategy {strategy!r} with {m_pre} distortions")
    return ReplayPlan(strategy, buffer_size, bins, np.asarray(ids, dtype=np.int64),
                      np.clip(scores, 0.0, 1.0))


# ---------------------------------------------------------------- batching

def _load_image(item) -> np.ndarray:
    if isinstance(item, str):
        with Image.open(item) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.asarray(item, dtype=np.float32)


def batch_inputs(samples: SampleSet, index, phase: str = "test", rng: np.random.Generator | None = None) -> torch.Tensor:
    index = np.asarray(index, dtype=np.int64)
    if samples.is_vector:
        return torch.from_numpy(np.ascontiguousarray(samples.inputs[index], dtype=np.float32))
    crops = [crop_for_phase(_load_image(samples.inputs[i]), phase, rng) for i in index]
    return torch.from_numpy(np.stack(crops).astype(np.float32))


@torch.no_grad()
def predict(model: Callable[[torch.Tensor], torch.Tensor], samples: SampleSet, chunk: int = 512) -> np.ndarray:
    out = [model(batch_inputs(samples, np.arange(a, min(a + chunk, len(samples))))).detach().cpu().numpy()
           for a in range(0, len(samples), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def safe_srcc(preds, targets) -> float:
    """SRCC with undefined cases (constant predictions) scored as 0."""
    try:
        return srcc(preds, targets)
    except UndefinedCorrelation:
        return 0.0


def per_distortion_srcc(preds: np.ndarray, samples: SampleSet) -> dict[int, float]:
    return {int(j): safe_srcc(preds[samples.distortion_ids == j], samples.scores[samples.distortion_ids == j])
            for j in np.unique(samples.distortion_ids)}


def mean_abs_srcc(preds: np.ndarray, samples: SampleSet) -> float:
    values = per_distortion_srcc(preds, samples)
    return float(np.mean([abs(v) for v in values.values()])) if values else 0.0


# ---------------------------------------------------------------- regressor loop

LossFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], tuple[torch.Tensor, dict]]


def _mse_only(x, feats, preds, scores):
    mse = L.mse_current_loss(preds, scores)
    return mse, {"mse": mse.item()}


def fit_regressor(regressor: SingleHeadRegressor, train: SampleSet, validate: Callable[[], float],
                  schedule: TrainSchedule, param_groups: list[dict], gen: torch.Generator, rng: np.random.Generator,
                  loss_fn: LossFn = _mse_only, on_step: Callable | None = None, stage: str = "merge",
                  records: list | None = None) -> dict:
    """Adam over ``epochs_single`` epochs, keeping the best validation epoch at or after the minimum epoch.

    ``on_step(before, grads)`` is invoked after every optimizer step with the
    parameter values before the step and the gradients that produced it.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    opt = torch.optim.Adam(param_groups, foreach=True)
    params = [p for g in param_groups for p in g["params"]]
    min_epoch = schedule.early_stop_min_epoch
    best = {"epoch": None, "val_srcc": -np.inf, "state": None}
    bs = schedule.batch_regression
    for epoch in range(1, schedule.epochs_single + 1):
        regressor.train()
        order = torch.randperm(len(train), generator=gen).numpy()
        sums: dict[str, float] = {}
        n_batches = 0
        for a in range(0, len(order), bs):
            idx = order[a:a + bs]
            x = batch_inputs(train, idx, "train", rng)
            scores = torch.as_tensor(train.scores[idx], dtype=torch.float32)
            feats = extract_features(regressor.extractor, x)
            preds = regressor.head(feats)
            loss, parts = loss_fn(x, feats, preds, scores)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            before = [p.detach().clone() for p in params] if on_step else None
            opt.step()
            if on_step:
                on_step(before, [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                                 for p in params])
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        regressor.eval()
        score = validate()
        record = {"stage": stage, "epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "val_srcc": score}
        if records is not None:
            records.append(record)
        log.debug(json.dumps(record))
        if epoch >= min_epoch and score > best["val_srcc"]:
            best = {"epoch": epoch, "val_srcc": score, "state": copy.deepcopy(regressor.state_dict())}
    regressor.load_state_dict(best["state"])
    return {"best_epoch": best["epoch"], "best_val_srcc": best["val_srcc"]}


# ---------------------------------------------------------------- learners

class Learner:
    """One continual-learning method driven task by task over a stream."""

    name = "base"
    uses_past_data = False

    def __init__(self, config: MethodConfig, seed: int):
        self.config = config
        self.seed = seed
        self.next_task = 0
        self.seen_ids: list[int] = []
        self.stage_log: list[tuple[int, str]] = []
        self.records: list[dict] = []
        self.regressor = build_bundle(config.backbone, config.d_in, derive_seed(seed, 11), config.pretrained).regressor

    # subclasses implement _fit(data, t, train, validate, gen, rng)
    def fit_task(self, data: AuditedStream, t: int) -> None:
        if t != self.next_task:
            raise ValueError(f"tasks must be learned in order: expected task {self.next_task}, got {t}")
        data.begin_task(t, allow_past=self.uses_past_data, allow_past_val=self.config.validation == "pooled_seen")
        gen = torch_generator(derive_seed(self.seed, t, 2))
        rng = np.random.default_rng(derive_seed(self.seed, t, 3))
        self._fit(data, t, gen, rng)
        self.seen_ids.extend(data.task(t).distortion_ids)
        self.next_task += 1

    def _fit(self, data: AuditedStream, t: int, gen: torch.Generator, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _validator(self, data: AuditedStream, t: int) -> Callable[[], float]:
        if self.config.validation == "pooled_seen":
            val = SampleSet.concat([data.val(k) for k in range(t + 1)])
        else:
            val = data.val(t)
        return lambda: mean_abs_srcc(self.predict(val), val)

    def predict(self, samples: SampleSet) -> np.ndarray:
        self.regressor.eval()
        return predict(self.regressor, samples)

    def evaluate(self, data: AuditedStream, t: int) -> dict[int, float]:
        out: dict[int, float] = {}
        for k in range(t + 1):
            test = data.test(k)
            out.update(per_distortion_srcc(self.predict(test), test))
        return out

    def state_dict(self) -> dict:
        return {"next_task": self.next_task, "seen_ids": list(self.seen_ids), "stage_log": list(self.stage_log),
                "regressor": self.regressor.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.next_task = state["next_task"]
        self.seen_ids = list(state["seen_ids"])
        self.stage_log = [tuple(s) for s in state["stage_log"]]
        self.regressor.load_state_dict(state["regressor"])


def _augment(train: SampleSet, factor: int, jitter: float, rng: np.random.Generator) -> tuple[list, np.ndarray, np.ndarray]:
    """``factor`` jittered copies of vectors, or ``factor`` random crops of images."""
    if train.is_vector:
        x = np.asarray(train.inputs, dtype=np.float32)
        std = x.std(axis=0, keepdims=True) if len(x) > 1 else np.ones_like(x[:1])
        copies = [x + jitter * std * rng.standard_normal(x.shape).astype(np.float32) for _ in range(factor)]
        return [np.concatenate(copies)], np.tile(train.scores, factor), np.tile(train.distortion_ids, factor)
    crops = [crop_for_phase(_load_image(item), "train", rng) for _ in range(factor) for item in train.inputs]
    return crops, np.tile(train.scores, factor), np.tile(train.distortion_ids, factor)


class LIQALearner(Learner):
    """Split-and-merge distillation with conditional pseudo-feature replay."""

    name = "liqa"

    def __init__(self, config: MethodConfig, seed: int, ablation: str | None = None):
        super().__init__(config, seed)
        if ablation is not None and ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
        self.ablation = ablation
        if ablation == "no_fd":
            self.config = replace(config, weights=replace(config.weights, lambda_FD=0.0))
        elif ablation == "no_pr":
            self.config = replace(config, weights=replace(config.weights, lambda_PR=0.0))
        self.bundle = build_bundle(config.backbone, config.d_in, derive_seed(seed, 11), config.pretrained)
        self.regressor = self.bundle.regressor

    @property
    def trains_gan(self) -> bool:
        return self.ablation != "no_pr"

    @property
    def trains_multihead(self) -> bool:
        return self.ablation not in ("no_pr", "no_split_merge")

    def _fit(self, data, t, gen, rng):
        ids = list(data.task(t).distortion_ids)
        if t > 0:
            needed = ["U"] + (["G", "D"] if self.trains_gan else []) + (["V"] if self.ablation == "no_split_merge" else [])
            missing = [k for k in needed if k not in self.bundle.snapshots]
            if missing:
                raise RuntimeError(f"task {t} needs snapshots {missing} from the previous task")
        register_task_heads(self.bundle, ids, derive_seed(self.seed, t, 1))
        train = self._training_data(data, t)
        validate = self._validator(data, t)

        self.stage_log.append((t, "merge"))
        self.train_single_head(t, train, validate, gen, rng)
        self.bundle.snapshots["U"] = snapshot(self.regressor.extractor)
        if self.trains_gan:
            self.stage_log.append((t, "gan"))
            self.train_gan(t, data.train(t), ids, gen, rng)
            self.bundle.snapshots["G"] = snapshot(self.bundle.generator)
            self.bundle.snapshots["D"] = snapshot(self.bundle.discriminator)
        if self.trains_multihead:
            self.stage_log.append((t, "multihead"))
            self.train_multihead(t, data.train(t), data.val(t), ids, gen)
        self.bundle.snapshots["V"] = snapshot(self.regressor.head)

    def _training_data(self, data: AuditedStream, t: int) -> SampleSet:
        return data.train(t)

    def _extractor_lr(self, t: int) -> float:
        s = self.config.schedule
        return s.lr_base if t == 0 else s.lr_extractor_novel

    # merge stage -----------------------------------------------------------------
    def replay_batch(self, gen: torch.Generator, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        """Pseudo features from the previous generator and their frozen pseudo labels."""
        plan = plan_replay(self.config.replay_strategy, self.config.buffer_size, self.seen_ids, QUALITY_BINS, rng)
        g_prev = self.bundle.snapshots["G"]
        with torch.no_grad():
            z = torch.randn(len(plan), g_prev.noise_dim, generator=gen)
            s = torch.as_tensor(plan.scores, dtype=torch.float32)
            h = g_prev(z, s, plan.ids)
            if self.ablation == "no_split_merge":
                target = self.bundle.snapshots["V"](h)
            else:
                target = self.bundle.multihead.predict_features(h, plan.ids)
        return h, target

    def train_single_head(self, t, train, validate, gen, rng) -> dict:
        cfg, w = self.config, self.config.weights
        base = t == 0
        groups = [{"params": list(self.regressor.extractor.parameters()), "lr": self._extractor_lr(t)},
                  {"params": list(self.regressor.head.parameters()), "lr": cfg.schedule.lr_base}]
        for g in groups:
            for p in g["params"]:
                p.requires_grad_(True)
        u_prev = self.bundle.snapshots.get("U")

        def loss_fn(x, feats, preds, scores):
            mse = L.mse_current_loss(preds, scores)
            parts = {"mse": mse.item()}
            if base:
                return L.single_head_total(0.0, 0.0, mse, w, True), parts
            fd = pr = torch.zeros(())
            if w.lambda_FD > 0:
                with torch.no_grad():
                    target = u_prev(x)
                fd = L.feature_distillation_loss(feats, target)
                parts["fd"] = fd.item()
            if w.lambda_PR > 0:
                h, target = self.replay_batch(gen, rng)
                pr = L.pseudo_replay_loss(self.regressor.head(h), target)
                parts["pr"] = pr.item()
            return L.single_head_total(fd, pr, mse, w, False), parts

        result = fit_regressor(self.regressor, train, validate, cfg.schedule, groups, gen, rng, loss_fn,
                               stage="merge", records=self.records)
        self.records.append({"stage": "merge", "task": t, **result})
        return result

    # split stage: generator / discriminator -----------------------------------------
    def _freeze_for_gan(self, ids: Sequence[int]) -> tuple[list, list]:
        b = self.bundle
        prev = [j for j in b.registered if j not in ids]
        b.freeze([f"generator.prior/{j}" for j in prev] + [f"generator.head/{j}" for j in prev]
                 + [f"discriminator.quality/{j}" for j in prev] + [f"discriminator.realfake/{j}" for j in prev])
        b.unfreeze(["generator.embed", "discriminator.embed"] + [f"generator.prior/{j}" for j in ids]
                   + [f"generator.head/{j}" for j in ids] + [f"discriminator.quality/{j}" for j in ids]
                   + [f"discriminator.realfake/{j}" for j in ids])
        g_params = [p for p in b.generator.parameters() if p.requires_grad]
        d_params = [p for p in b.discriminator.parameters() if p.requires_grad]
        return g_params, d_params

    def real_features(self, train: SampleSet, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        s = self.config.schedule
        inputs, scores, ids = _augment(train, s.gan_augmentation_factor, s.augmentation_jitter, rng)
        u = self.bundle.snapshots["U"]
        with torch.no_grad():
            if len(inputs) == 1 and isinstance(inputs[0], np.ndarray) and inputs[0].ndim == 2:
                x = torch.from_numpy(inputs[0])
                feats = torch.cat([u(x[a:a + 1024]) for a in range(0, len(x), 1024)])
            else:
                feats = torch.cat([u(torch.from_numpy(np.stack(inputs[a:a + 64]))) for a in range(0, len(inputs), 64)])
        return feats, torch.as_tensor(scores, dtype=torch.float32), torch.as_tensor(ids, dtype=torch.long)

    def gan_losses(self, t: int, real: torch.Tensor, s: torch.Tensor, j: torch.Tensor, gen: torch.Generator,
                   prev_ids: Sequence[int]) -> tuple[Callable[[], tuple], Callable[[], tuple]]:
        """Closures computing the discriminator and generator objectives for one batch."""
        cfg, w = self.config, self.config.weights
        G, D = self.bundle.generator, self.bundle.discriminator
        base = t == 0
        g_prev, d_prev = self.bundle.snapshots.get("G"), self.bundle.snapshots.get("D")
        n = real.shape[0]

        def align_batch():
            z = torch.randn(n, G.noise_dim, generator=gen)
            s_bar = torch.rand(n, generator=gen)
            j_bar = torch.as_tensor(prev_ids, dtype=torch.long)[torch.randint(len(prev_ids), (n,), generator=gen)]
            return z, s_bar, j_bar

        def d_loss():
            z = torch.randn(n, G.noise_dim, generator=gen)
            with torch.no_grad():
                fake = G(z, s, j)
            r1 = cfg.schedule.gan_r1
            x_real = real.detach().requires_grad_(True) if r1 > 0 else real
            q_real, v_real = D(x_real, j)
            q_fake, v_fake = D(fake, j)
            adv = L.adversarial_value(v_real, v_fake)
            adv_term = -adv if cfg.adversarial_sign == "standard" else adv
            if r1 > 0:
                adv_term = adv_term + r1 * L.real_gradient_penalty(v_real, x_real)
            if cfg.quality_assignment == "text":
                quality = L.quality_real_loss(q_real, s)
            else:
                quality = L.quality_fake_loss(q_fake, s)
            da = torch.zeros(())
            if not base:
                z2, s2, j2 = align_batch()
                with torch.no_grad():
                    h_prev = g_prev(z2, s2, j2)
                    prev_out = d_prev(h_prev, j2)
                da = L.discriminator_alignment_loss(D(h_prev, j2), prev_out)
            total = L.discriminator_objective(adv_term, quality, da, w, base)
            return total, {"d_adv": adv_term.item(), "d_qua": quality.item(), "da": da.item()}

        def g_loss():
            z = torch.randn(n, G.noise_dim, generator=gen)
            fake = G(z, s, j)
            q_fake, v_fake = D(fake, j)
            if cfg.adversarial_sign == "standard":
                adv_term = L.generator_adversarial_loss(v_fake)
            else:
                with torch.no_grad():
                    _, v_real = D(real, j)
                adv_term = -L.adversarial_value(v_real, v_fake)
            if cfg.quality_assignment == "text":
                quality = L.quality_fake_loss(q_fake, s)
            else:
                with torch.no_grad():
                    q_real, _ = D(real, j)
                quality = L.quality_real_loss(q_real, s)
            ga = torch.zeros(())
            if not base:
                z2, s2, j2 = align_batch()
                with torch.no_grad():
                    target = g_prev(z2, s2, j2)
                ga = L.generator_alignment_loss(G(z2, s2, j2), target)
            total = L.generator_objective(adv_term, quality, ga, w, base)
            return total, {"g_adv": adv_term.item(), "g_qua": quality.item(), "ga": ga.item()}

        return d_loss, g_loss

    def train_gan(self, t: int, train: SampleSet, ids: Sequence[int], gen: torch.Generator,
                  rng: np.random.Generator) -> None:
        s = self.config.schedule
        g_params, d_params = self._freeze_for_gan(ids)
        feats, scores, fids = self.real_features(train, rng)
        prev_ids = [j for j in self.bundle.registered if j not in ids]
        opt_g = torch.optim.Adam(g_params, lr=s.lr_gan, betas=(s.gan_beta1, 0.999), foreach=True)
        opt_d = torch.optim.Adam(d_params, lr=s.lr_gan, betas=(s.gan_beta1, 0.999), foreach=True)
        G, D = self.bundle.generator, self.bundle.discriminator
        total_steps = s.epochs_gan * -(-len(feats) // s.batch_gan)
        schedulers = []
        if s.gan_lr_decay == "linear":
            schedulers = [torch.optim.lr_scheduler.LambdaLR(o, lambda k: 1.0 - k / total_steps) for o in (opt_g, opt_d)]
        ema = [p.detach().clone() for p in g_params] if s.gan_ema > 0 else None
        G.train()
        D.train()
        for epoch in range(1, s.epochs_gan + 1):
            order = torch.randperm(len(feats), generator=gen)
            sums: dict[str, float] = {}
            n_batches = 0
            for a in range(0, len(order), s.batch_gan):
                idx = order[a:a + s.batch_gan]
                d_loss, g_loss = self.gan_losses(t, feats[idx], scores[idx], fids[idx], gen, prev_ids)
                loss, parts_d = d_loss()
                opt_d.zero_grad(set_to_none=True)
                loss.backward()
                opt_d.step()
                loss, parts_g = g_loss()
                opt_g.zero_grad(set_to_none=True)
                loss.backward()
                opt_g.step()
                if ema is not None:
                    with torch.no_grad():
                        torch._foreach_lerp_(ema, [p.detach() for p in g_params], 1.0 - s.gan_ema)
                for sched in schedulers:
                    sched.step()
                for k, v in {**parts_d, **parts_g}.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            record = {"stage": "gan", "task": t, "epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
            self.records.append(record)
            log.debug(json.dumps(record))
        if ema is not None:
            with torch.no_grad():
                for p, avg in zip(g_params, ema):
                    p.copy_(avg)
        G.eval()
        D.eval()
        for p in list(G.parameters()) + list(D.parameters()):
            p.grad = None

    # split stage: auxiliary multi-head regressor --------------------------------------
    def train_multihead(self, t: int, train: SampleSet, val: SampleSet, ids: Sequence[int],
                        gen: torch.Generator) -> dict:
        s = self.config.schedule
        b = self.bundle
        mh = b.multihead
        mh.extractor.load_state_dict(self.regressor.extractor.state_dict())
        b.freeze(["multihead.extractor"] + [f"multihead.head/{j}" for j in b.registered if j not in ids])
        b.unfreeze([f"multihead.head/{j}" for j in ids])
        params = [p for j in ids for p in mh.heads[str(j)].parameters()]
        mh.eval()
        with torch.no_grad():
            f_train = predict(mh.extractor, train)
            f_val = predict(mh.extractor, val)
        f_train, f_val = torch.from_numpy(f_train), torch.from_numpy(f_val)
        y_train = torch.as_tensor(train.scores, dtype=torch.float32)
        id_train = torch.as_tensor(train.distortion_ids)
        opt = torch.optim.Adam(params, lr=s.lr_base, foreach=True)
        best = {"epoch": None, "val_srcc": -np.inf, "state": None}
        for epoch in range(1, s.epochs_multi + 1):
            order = torch.randperm(len(train), generator=gen)
            for a in range(0, len(order), s.batch_regression):
                idx = order[a:a + s.batch_regression]
                loss = L.multihead_mse(mh.predict_features(f_train[idx], id_train[idx]), y_train[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            with torch.no_grad():
                preds = mh.predict_features(f_val, val.distortion_ids).numpy()
            score = mean_abs_srcc(preds, val)
            self.records.append({"stage": "multihead", "task": t, "epoch": epoch, "val_srcc": score})
            if epoch >= min(s.early_stop_min_epoch, s.epochs_multi) and score > best["val_srcc"]:
                best = {"epoch": epoch, "val_srcc": score,
                        "state": {j: copy.deepcopy(mh.heads[str(j)].state_dict()) for j in ids}}
        for j in ids:
            mh.heads[str(j)].load_state_dict(best["state"][j])
            for p in mh.heads[str(j)].parameters():
                p.grad = None
        b.freeze([f"multihead.head/{j}" for j in ids])
        return {"best_epoch": best["epoch"], "best_val_srcc": best["val_srcc"]}

    # persistence ----------------------------------------------------------------
    def state_dict(self) -> dict:
        b = self.bundle
        return {
            **super().state_dict(),
            "registered": list(b.registered),
            "multihead": b.multihead.state_dict(),
            "generator": b.generator.state_dict(),
            "discriminator": b.discriminator.state_dict(),
            "snapshots": {k: m.state_dict() for k, m in b.snapshots.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        b = self.bundle
        if b.registered:
            raise RuntimeError("load into a freshly constructed learner")
        register_task_heads(b, state["registered"], 0)
        super().load_state_dict(state)
        b.multihead.load_state_dict(state["multihead"])
        b.generator.load_state_dict(state["generator"])
        b.discriminator.load_state_dict(state["discriminator"])
        sources = {"U": b.regressor.extractor, "V": b.regressor.head, "G": b.generator, "D": b.discriminator}
        for k, sd in state["snapshots"].items():
            m = snapshot(sources[k])
            m.load_state_dict(sd)
            b.snapshots[k] = m
        b.freeze([g for g in b.parameter_groups() if g.startswith(("multihead.", "generator.prior", "generator.head",
                                                                      "discriminator.quality", "discriminator.realfake"))])
