"""Comparison methods sharing the single-head regressor: fine-tuning, EWC,
online EWC, synaptic intelligence, joint training and joint training with
pseudo replay."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .tasks import AuditedStream, SampleSet
from .trainer import LIQALearner, Learner, MethodConfig, batch_inputs, fit_regressor

Params = dict[str, torch.Tensor]


def ft_loss(preds: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    return L.mse_current_loss(preds, scores)


def jt_loss(preds_over_all_tasks: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """Plain MSE over the pooled data of every task so far."""
    return L.mse_current_loss(preds_over_all_tasks, scores)


def jt_pr_loss(jt: torch.Tensor, replay: torch.Tensor, weights: L.LossWeights = L.LossWeights()) -> torch.Tensor:
    return jt + weights.lambda_PR * replay


def fisher_diagonal(model: nn.Module, inputs: torch.Tensor, scores: torch.Tensor) -> Params:
    """Mean over samples of the squared per-sample gradient of the squared error.

    Gradients are taken one sample at a time; a batched gradient would square
    the mean instead of averaging the squares.
    """
    if len(inputs) == 0:
        raise ValueError("cannot estimate a Fisher diagonal from an empty dataset")
    named = [(n, p) for n, p in model.named_parameters()]
    fisher = {n: torch.zeros_like(p) for n, p in named}
    was_training = model.training
    model.eval()
    for i in range(len(inputs)):
        pred = model(inputs[i:i + 1])
        loss = ((pred - scores[i:i + 1].to(pred.dtype)) ** 2).sum()
        grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
        for (n, _), g in zip(named, grads):
            if g is not None:
                fisher[n] += g.detach() ** 2
    model.train(was_training)
    return {n: f / len(inputs) for n, f in fisher.items()}


def current_params(model: nn.Module) -> Params:
    return {n: p for n, p in model.named_parameters()}


def _detached(params: Params) -> Params:
    return {n: p.detach().clone() for n, p in params.items()}


@dataclass
class FisherState:
    """Per-task Fisher diagonals and anchors, plus the online running sum."""

    fishers: list[Params] = field(default_factory=list)
    anchors: list[Params] = field(default_factory=list)
    running: Params | None = None
    gamma: float = 1.0

    def consolidate(self, fisher: Params, anchor: Params) -> None:
        self.fishers.append({n: f.detach().clone() for n, f in fisher.items()})
        self.anchors.append(_detached(anchor))
        if self.running is None:
            self.running = {n: f.detach().clone() for n, f in fisher.items()}
        else:
            self.running = {n: self.gamma * self.running[n] + fisher[n].detach() for n in fisher}


def ewc_penalty(theta: Params, state: FisherState) -> torch.Tensor:
    """Half the Fisher-weighted squared distance to every earlier task's anchor."""
    total = torch.zeros(())
    for fisher, anchor in zip(state.fishers, state.anchors):
        missing = set(fisher) - set(theta)
        if missing:
            raise KeyError(f"no current value for anchored parameters {sorted(missing)}")
        for n, f in fisher.items():
            total = total + (f * (theta[n] - anchor[n]) ** 2).sum()
    return 0.5 * total


def online_ewc_penalty(theta: Params, state: FisherState) -> torch.Tensor:
    """Running-sum Fisher times squared distance to the latest anchor (no 1/2 factor)."""
    if state.running is None:
        return torch.zeros(())
    anchor = state.anchors[-1]
    total = torch.zeros(())
    for n, f in state.running.items():
        total = total + (f * (theta[n] - anchor[n]) ** 2).sum()
    return total


@dataclass
class SIState:
    xi: float = 0.1
    omega: Params = field(default_factory=dict)
    start: Params = field(default_factory=dict)
    importance: Params = field(default_factory=dict)
    anchor: Params = field(default_factory=dict)
    n_iters: int = 0

    def begin_task(self, params: Params) -> None:
        self.start = _detached(params)
        self.omega = {n: torch.zeros_like(p) for n, p in self.start.items()}
        self.n_iters = 0

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.start.values())


def si_accumulate(state: SIState, before: Params, after: Params, grad: Params) -> SIState:
    """Add one step's contribution (theta_n - theta_{n-1}) * (-dL/dtheta) to the path integral."""
    if set(before) != set(state.omega) or set(after) != set(before) or set(grad) != set(before):
        raise KeyError("parameter sets of the step record do not match the tracked parameters")
    for n in state.omega:
        state.omega[n] += (after[n].detach() - before[n].detach()) * (-grad[n].detach())
    state.n_iters += 1
    return state


def si_consolidate(state: SIState, params_end: Params) -> SIState:
    """Fold the finished task's path integral into the running importance, then reset."""
    for n, w in state.omega.items():
        displacement = params_end[n].detach() - state.start[n]
        inc = w / (displacement ** 2 + state.xi)
        state.importance[n] = state.importance[n] + inc if n in state.importance else inc.clone()
    state.anchor = _detached(params_end)
    state.omega = {n: torch.zeros_like(w) for n, w in state.omega.items()}
    state.start = _detached(params_end)
    state.n_iters = 0
    return state


def si_penalty(theta: Params, state: SIState) -> torch.Tensor:
    total = torch.zeros(())
    for n, omega in state.importance.items():
        total = total + (omega * (theta[n] - state.anchor[n]) ** 2).sum()
    return total


# ---------------------------------------------------------------- learners

class _RegularizedLearner(Learner):
    """Fine-tunes the whole regressor at ``lr_base`` with an optional penalty."""

    def penalty(self) -> torch.Tensor | None:
        return None

    def step_hook(self):
        return None

    def _train_data(self, data: AuditedStream, t: int) -> SampleSet:
        return data.train(t)

    def _fit(self, data, t, gen, rng):
        self.stage_log.append((t, "merge"))
        cfg = self.config
        train = self._train_data(data, t)
        validate = self._validator(data, t)
        params = list(self.regressor.parameters())
        for p in params:
            p.requires_grad_(True)

        def loss_fn(x, feats, preds, scores):
            fit = ft_loss(preds, scores)
            parts = {"mse": fit.item()}
            reg = self.penalty() if t > 0 else None
            if reg is None:
                return fit, parts
            parts["reg"] = reg.item()
            return fit + reg, parts

        result = fit_regressor(self.regressor, train, validate, cfg.schedule,
                               [{"params": params, "lr": cfg.schedule.lr_base}], gen, rng, loss_fn,
                               on_step=self.step_hook(), stage="merge", records=self.records)
        self.records.append({"stage": "merge", "task": t, **result})
        self.after_task(data, t, train)

    def after_task(self, data: AuditedStream, t: int, train: SampleSet) -> None:
        pass


class FTLearner(_RegularizedLearner):
    name = "ft"


class EWCLearner(_RegularizedLearner):
    name = "ewc"
    online = False

    def __init__(self, config: MethodConfig, seed: int):
        super().__init__(config, seed)
        self.fisher = FisherState(gamma=config.gamma)

    def penalty(self):
        theta = current_params(self.regressor)
        if self.online:
            return self.config.lambda_online_ewc * online_ewc_penalty(theta, self.fisher)
        return self.config.lambda_ewc * ewc_penalty(theta, self.fisher)

    def after_task(self, data, t, train):
        x = batch_inputs(train, np.arange(len(train)), "test")
        y = torch.as_tensor(train.scores, dtype=torch.float32)
        fisher = fisher_diagonal(self.regressor, x, y)
        self.fisher.consolidate(fisher, current_params(self.regressor))

    def state_dict(self):
        return {**super().state_dict(), "fisher": {"fishers": self.fisher.fishers, "anchors": self.fisher.anchors,
                                                   "running": self.fisher.running, "gamma": self.fisher.gamma}}

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.fisher = FisherState(**state["fisher"])


class OnlineEWCLearner(EWCLearner):
    name = "online_ewc"
    online = True


class SILearner(_RegularizedLearner):
    name = "si"

    def __init__(self, config: MethodConfig, seed: int):
        super().__init__(config, seed)
        self.si = SIState(xi=config.xi)

    def penalty(self):
        return self.config.lambda_si * si_penalty(current_params(self.regressor), self.si)

    def step_hook(self):
        names = [n for n, _ in self.regressor.named_parameters()]
        self.si.begin_task(current_params(self.regressor))

        def hook(before, grads):
            after = current_params(self.regressor)
            si_accumulate(self.si, dict(zip(names, before)), after, dict(zip(names, grads)))

        return hook

    def after_task(self, data, t, train):
        si_consolidate(self.si, current_params(self.regressor))

    def state_dict(self):
        s = self.si
        return {**super().state_dict(), "si": {"xi": s.xi, "omega": s.omega, "start": s.start,
                                               "importance": s.importance, "anchor": s.anchor, "n_iters": s.n_iters}}

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.si = SIState(**state["si"])


class JTLearner(_RegularizedLearner):
    """Upper bound: trains on the pooled training data of every task so far."""

    name = "jt"
    uses_past_data = True

    def _train_data(self, data, t):
        return SampleSet.concat([data.train(k) for k in range(t + 1)])


class JTPRLearner(LIQALearner):
    """Joint training plus balanced pseudo-feature replay from the continual generator."""

    name = "jt_pr"
    uses_past_data = True

    def __init__(self, config: MethodConfig, seed: int):
        super().__init__(config, seed)
        self.config = replace(config, weights=replace(config.weights, lambda_FD=0.0))

    def _training_data(self, data, t):
        return SampleSet.concat([data.train(k) for k in range(t + 1)])

    def _extractor_lr(self, t):
        return self.config.schedule.lr_base


METHODS = {
    "ft": FTLearner,
    "ewc": EWCLearner,
    "online_ewc": OnlineEWCLearner,
    "si": SILearner,
    "liqa": LIQALearner,
    "jt": JTLearner,
    "jt_pr": JTPRLearner,
}


def make_learner(method: str, config: MethodConfig, seed: int, ablation: str | None = None) -> Learner:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    if ablation is not None:
        if method != "liqa":
            raise ValueError("ablations apply to the liqa method only")
        return LIQALearner(config, seed, ablation)
    return METHODS[method](config, seed)
