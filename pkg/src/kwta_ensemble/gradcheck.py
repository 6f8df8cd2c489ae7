"""Central finite-difference checks of the analytic gradients of every family."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .ensemble import EnsembleModel, Family, backward_for_family, build_model, forward
from .linalg import make_rng

__all__ = ["GradcheckResult", "family_objective", "tiny_instance", "check_family", "run_gradcheck"]

FD_STEP = 1e-6
TOLERANCE = 1e-5
# Instances whose piecewise-linear parts sit closer than this to a kink are redrawn.
KINK_MARGIN = 1e-3
# Relative errors are measured against max(|analytic|, |numeric|, REL_FLOOR).
REL_FLOOR = 1e-3


@dataclass
class GradcheckResult:
    family: str
    label: str
    max_rel_err: float
    worst_block: str
    worst_index: tuple
    n_checked: int
    seed: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def family_objective(model: EnsembleModel, x: np.ndarray, labels: np.ndarray, epoch: int) -> float:
    """Scalar whose gradient :func:`backward_for_family` is expected to produce.

    Written from the forward outputs only. For the independent family it is
    the sum of the members' own losses, since each member's gradient is that
    of its own loss.
    """
    out = forward(model, x, epoch)
    if model.family is Family.INDEPENDENT:
        return sum(nn.cross_entropy(p, labels) for p in out.subnet_probs)
    if model.family is Family.MOE:
        rows = np.arange(len(labels))
        weight = out.gate_probs[rows, out.selected]
        return float(np.mean(weight * nn.cross_entropy_per_sample(out.final_probs, labels)))
    return nn.cross_entropy(out.final_probs, labels)


def _near_kink(model: EnsembleModel, x: np.ndarray, epoch: int) -> bool:
    nets = list(model.subnets) + ([model.gate] if model.gate is not None else [])
    for net in nets:
        if np.any(np.abs(x @ net.w1.T + net.b1) < KINK_MARGIN):
            return True
    out = forward(model, x, epoch)
    if out.gate_probs is not None:
        top2 = np.sort(out.gate_probs, axis=1)[:, -2:]
        if np.any(top2[:, 1] - top2[:, 0] < KINK_MARGIN):
            return True
    if out.pre_kwta is not None and out.kwta_mask is not None:
        z = np.sort(out.pre_kwta, axis=1)
        if np.any(np.diff(z, axis=1) < KINK_MARGIN):
            return True
    return False


def tiny_instance(
    family, seed: int, delay_epochs: int = 0, epoch: int = 0, in_dim: int = 3, hidden: int = 4,
    n_classes: int = 3, n_subnets: int = 2, batch: int = 6, member_output: str = "probs",
):
    """Draw a small model and batch, rejecting draws that sit near a kink."""
    for attempt in range(1000):
        rng = make_rng([seed, attempt])
        model = build_model(family, in_dim, n_classes, n_subnets, rng, hidden_dim=hidden, delay_epochs=delay_epochs,
                            member_output=member_output)
        for p in model.parameter_sets():
            p.set_values(**{k: rng.normal(0.0, 1.0, v.shape) for k, v in p.values.items()})
        x = rng.normal(0.0, 1.0, (batch, in_dim))
        labels = rng.integers(0, n_classes, batch)
        if not _near_kink(model, x, epoch):
            return model, x, labels
    raise RuntimeError(f"no kink-free instance found for {family} after 1000 draws")


def _blocks(model: EnsembleModel):
    for i, net in enumerate(model.subnets):
        yield f"subnet{i}", net
    if model.gate is not None:
        yield "gate", model.gate
    if model.combiner is not None:
        yield "combiner", model.combiner


def check_family(
    family, seed: int = 0, delay_epochs: int = 0, epoch: int = 0, label: str | None = None,
    member_output: str = "probs",
) -> GradcheckResult:
    family = Family(family)
    model, x, labels = tiny_instance(family, seed, delay_epochs=delay_epochs, epoch=epoch, member_output=member_output)
    model.zero_grad()
    backward_for_family(model, forward(model, x, epoch), labels)

    worst = (0.0, "", ())
    count = 0
    for block_name, params in _blocks(model):
        for name, theta in params.values.items():
            analytic = params.grads[name]
            for idx in np.ndindex(theta.shape):
                orig = theta[idx]
                theta[idx] = orig + FD_STEP
                up = family_objective(model, x, labels, epoch)
                theta[idx] = orig - FD_STEP
                down = family_objective(model, x, labels, epoch)
                theta[idx] = orig
                numeric = (up - down) / (2 * FD_STEP)
                a = analytic[idx]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
                count += 1
                if rel > worst[0]:
                    worst = (rel, f"{block_name}.{name}", idx)
    model.zero_grad()
    return GradcheckResult(family.value, label or family.value, worst[0], worst[1], worst[2], count, seed)


def run_gradcheck(seed: int = 0) -> list[GradcheckResult]:
    """All four families, plus two kWTA variants: delay still active, and logit members."""
    return [
        check_family(Family.INDEPENDENT, seed),
        check_family(Family.COOPERATIVE, seed),
        check_family(Family.MOE, seed),
        check_family(Family.KWTA, seed),
        check_family(Family.KWTA, seed, delay_epochs=3, epoch=1, label="kwta (delay active)"),
        check_family(Family.KWTA, seed, label="kwta (logit members)", member_output="logits"),
    ]
