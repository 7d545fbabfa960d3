"""Adam updates, parameter groups, gradient plumbing, and the phase/EM
schedule that drives ensemble fitting.

Optimization proceeds in three cumulative phases: cameras first, then bone
transforms (pose and scales) join, and finally the shape parameters
(latent codes and deformation MLPs). The feature E-step fires on a fixed
period within the second and third phases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

GROUP_NAMES = ("camera", "pose", "scales", "codes", "deform")


class GradientError(RuntimeError):
    pass


@dataclass
class ParamGroup:
    name: str
    params: list[torch.Tensor]
    lr: float
    enabled: bool = True

    def num_elements(self) -> int:
        return sum(p.numel() for p in self.params)


@dataclass
class AdamState:
    """First/second moment estimates and step counter for one group."""

    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: Sequence[torch.Tensor], **kw) -> "AdamState":
        return AdamState(
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    for g in grads:
        if not torch.isfinite(g).all():
            raise GradientError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / bias1
            v_hat = v / bias2
            p.add_(-lr * m_hat / (v_hat.sqrt() + state.eps))
    return state


class Adam:
    """Adam over named parameter groups with per-group learning rates.

    Disabled groups are skipped entirely: their parameters and moment
    estimates stay bitwise unchanged across a step.
    """

    def __init__(self, groups: Sequence[ParamGroup]):
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise ValueError("duplicate group names")
        self.groups = {g.name: g for g in groups}
        self.state = {g.name: AdamState.for_params(g.params) for g in groups}

    def step(self, grads: dict[str, list[torch.Tensor]]) -> None:
        for name, group in self.groups.items():
            if not group.enabled:
                continue
            glist = grads.get(name, [])
            if not glist:
                continue
            try:
                adam_step(group.params, glist, self.state[name], group.lr)
            except GradientError as exc:
                raise GradientError(f"group {name!r}: {exc}") from exc

    def set_enabled(self, active: set[str]) -> None:
        for name, group in self.groups.items():
            group.enabled = name in active


def compute_gradients(
    objective: Callable[[], torch.Tensor],
    groups: Sequence[ParamGroup],
) -> dict[str, list[torch.Tensor]]:
    """Evaluate the objective closure and return per-group gradients.

    Enabled groups get one gradient tensor per parameter (zeros where a
    parameter does not influence the objective); disabled groups get an
    empty list. Raises :class:`GradientError` on a non-finite objective.
    """
    for group in groups:
        for p in group.params:
            p.grad = None
    loss = objective()
    if not torch.isfinite(loss):
        raise GradientError(f"objective is non-finite: {float(loss)}")
    if loss.requires_grad:
        loss.backward()
    out: dict[str, list[torch.Tensor]] = {}
    for group in groups:
        if not group.enabled:
            out[group.name] = []
            continue
        out[group.name] = [
            p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            for p in group.params
        ]
    return out


@dataclass
class ScheduleConfig:
    phases: tuple[int, int, int] = (300, 300, 500)
    em_period: int = 2

    @property
    def total_iterations(self) -> int:
        return sum(self.phases)


def schedule(iteration: int, config: ScheduleConfig) -> tuple[set[str], bool]:
    """Active parameter groups and whether to run an E-step this iteration."""
    p1, p2, _ = config.phases
    if iteration < p1:
        active = {"camera"}
        do_e = False
    elif iteration < p1 + p2:
        active = {"camera", "pose", "scales"}
        do_e = iteration % config.em_period == 0
    else:
        active = {"camera", "pose", "scales", "codes", "deform"}
        do_e = iteration % config.em_period == 0
    return active, do_e
