"""Ensemble families built from MLP sub-networks and their combination rules.

Four families share the same sub-network architecture:

* ``independent`` -- each sub-network minimises its own loss; outputs are
  averaged only at prediction time.
* ``cooperative`` -- sub-network probabilities are averaged and the loss of
  the average is backpropagated into every member.
* ``moe`` -- a gating MLP picks one expert per sample (hard arg max); the
  loss is that expert's cross-entropy weighted by the gate probability.
* ``kwta`` -- sub-network probabilities are concatenated, mixed by an affine
  layer, passed through k-winners-take-all (after ``delay_epochs`` epochs)
  and a final softmax. ``member_output="logits"`` feeds raw member logits
  to the combiner instead of probabilities.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import nn
from .linalg import ShapeError, argmax_rows, as_matrix
from .nn import CombinerParams, ForwardTrace, MlpParams, Params, TraceError

__all__ = [
    "Family",
    "EnsembleModel",
    "ModelOutput",
    "CheckpointError",
    "build_model",
    "combine_average",
    "forward",
    "forward_cooperative",
    "forward_moe",
    "forward_kwta",
    "moe_loss_and_grads",
    "backward_for_family",
    "save_model",
    "load_model",
]

CHECKPOINT_MAGIC = b"KWTAENS\x00"
CHECKPOINT_VERSION = 1
MEMBER_OUTPUTS = ("probs", "logits")


class Family(str, Enum):
    INDEPENDENT = "independent"
    COOPERATIVE = "cooperative"
    MOE = "moe"
    KWTA = "kwta"


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent."""


@dataclass
class EnsembleModel:
    family: Family
    subnets: list[MlpParams]
    gate: MlpParams | None = None
    combiner: CombinerParams | None = None
    k_frac: float = 0.75
    delay_epochs: int = 0
    # What each member hands to the kWTA combiner.
    member_output: str = "probs"
    # Epoch during which the current parameters were produced; decides
    # whether the kWTA delay is still active at prediction time.
    epoch: int = 0

    def __post_init__(self):
        self.family = Family(self.family)
        if not self.subnets:
            raise ValueError("an ensemble needs at least one sub-network")
        dims = {(s.in_dim, s.out_dim) for s in self.subnets}
        if len(dims) != 1:
            raise ShapeError(f"sub-networks disagree on (in_dim, out_dim): {sorted(dims)}")
        if (self.family is Family.MOE) != (self.gate is not None):
            raise ValueError("a gate network is required for, and only for, the moe family")
        if (self.family is Family.KWTA) != (self.combiner is not None):
            raise ValueError("a combiner is required for, and only for, the kwta family")
        if self.gate is not None:
            if self.gate.in_dim != self.in_dim or self.gate.out_dim != self.n_subnets:
                raise ShapeError(
                    f"gate maps {self.gate.in_dim}->{self.gate.out_dim}, expected {self.in_dim}->{self.n_subnets}"
                )
        if self.combiner is not None:
            expected = (self.n_classes, self.n_subnets * self.n_classes)
            if self.combiner.wz.shape != expected:
                raise ShapeError(f"combiner weight has shape {self.combiner.wz.shape}, expected {expected}")
        nn.n_winners(self.k_frac, self.n_classes)
        if self.delay_epochs < 0:
            raise ValueError(f"delay_epochs must be >= 0, got {self.delay_epochs}")
        if self.member_output not in MEMBER_OUTPUTS:
            raise ValueError(f"member_output must be one of {MEMBER_OUTPUTS}, got {self.member_output!r}")

    @property
    def n_subnets(self) -> int:
        return len(self.subnets)

    @property
    def in_dim(self) -> int:
        return self.subnets[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.subnets[0].out_dim

    @property
    def hidden_dim(self) -> int:
        return self.subnets[0].hidden_dim

    def parameter_sets(self) -> list[Params]:
        sets: list[Params] = list(self.subnets)
        if self.gate is not None:
            sets.append(self.gate)
        if self.combiner is not None:
            sets.append(self.combiner)
        return sets

    def zero_grad(self):
        for p in self.parameter_sets():
            p.zero_grad()

    def snapshot(self) -> dict:
        return {"epoch": self.epoch, "params": [p.snapshot() for p in self.parameter_sets()]}

    def restore(self, snap: dict):
        for p, s in zip(self.parameter_sets(), snap["params"]):
            p.restore(s)
        self.epoch = snap["epoch"]


@dataclass
class ModelOutput:
    final_probs: np.ndarray
    subnet_probs: list[np.ndarray]
    gate_probs: np.ndarray | None = None
    selected: np.ndarray | None = None
    concat: np.ndarray | None = None
    pre_kwta: np.ndarray | None = None
    kwta_mask: np.ndarray | None = None
    traces: list[ForwardTrace] = field(default_factory=list)
    gate_trace: ForwardTrace | None = None
    model_id: int = 0
    combiner_version: int | None = None


def build_model(
    family,
    in_dim: int,
    n_classes: int,
    n_subnets: int,
    rng: np.random.Generator,
    hidden_dim: int = 100,
    k_frac: float = 0.75,
    delay_epochs: int = 0,
    member_output: str = "probs",
) -> EnsembleModel:
    family = Family(family)
    subnets = [nn.init_mlp(rng, in_dim, hidden_dim, n_classes) for _ in range(n_subnets)]
    gate = nn.init_mlp(rng, in_dim, hidden_dim, n_subnets) if family is Family.MOE else None
    combiner = nn.init_combiner(rng, n_subnets, n_classes) if family is Family.KWTA else None
    return EnsembleModel(
        family, subnets, gate=gate, combiner=combiner, k_frac=k_frac, delay_epochs=delay_epochs,
        member_output=member_output,
    )


def combine_average(subnet_probs: list[np.ndarray]) -> np.ndarray:
    if not subnet_probs:
        raise ValueError("cannot average an empty list of outputs")
    shapes = {np.shape(p) for p in subnet_probs}
    if len(shapes) != 1:
        raise ShapeError(f"outputs have differing shapes: {sorted(shapes)}")
    return np.mean(np.stack([as_matrix(p) for p in subnet_probs]), axis=0)


def _require(model: EnsembleModel, *families: Family):
    if model.family not in families:
        names = ", ".join(f.value for f in families)
        raise TraceError(f"operation requires family {names}, model is {model.family.value}")


def _run_subnets(model: EnsembleModel, x: np.ndarray):
    probs, traces = [], []
    for net in model.subnets:
        p, t = nn.mlp_forward(net, x)
        probs.append(p)
        traces.append(t)
    return probs, traces


def forward_cooperative(model: EnsembleModel, x: np.ndarray) -> ModelOutput:
    _require(model, Family.COOPERATIVE, Family.INDEPENDENT)
    probs, traces = _run_subnets(model, x)
    return ModelOutput(combine_average(probs), probs, traces=traces, model_id=id(model))


def forward_moe(model: EnsembleModel, x: np.ndarray) -> ModelOutput:
    _require(model, Family.MOE)
    probs, traces = _run_subnets(model, x)
    gate_probs, gate_trace = nn.mlp_forward(model.gate, x)
    selected = argmax_rows(gate_probs)
    stacked = np.stack(probs, axis=1)  # (batch, M, classes)
    final = stacked[np.arange(stacked.shape[0]), selected]
    return ModelOutput(
        final,
        probs,
        gate_probs=gate_probs,
        selected=selected,
        traces=traces,
        gate_trace=gate_trace,
        model_id=id(model),
    )


def kwta_active(model: EnsembleModel, current_epoch: int) -> bool:
    return current_epoch >= model.delay_epochs


def forward_kwta(model: EnsembleModel, x: np.ndarray, current_epoch: int | None = None) -> ModelOutput:
    """Concatenate member outputs, mix affinely, apply kWTA then softmax.

    kWTA is bypassed while ``current_epoch < model.delay_epochs``. Without an
    explicit epoch the model's own ``epoch`` is used. Members contribute
    probabilities unless ``model.member_output`` is ``"logits"``.
    """
    _require(model, Family.KWTA)
    if current_epoch is None:
        current_epoch = model.epoch
    probs, traces = _run_subnets(model, x)
    if model.member_output == "logits":
        concat = np.concatenate([t.logits for t in traces], axis=1)
    else:
        concat = np.concatenate(probs, axis=1)
    z = concat @ model.combiner.wz.T + model.combiner.bz
    if kwta_active(model, current_epoch):
        a, mask = nn.kwta_forward(z, model.k_frac)
    else:
        a, mask = z, None
    return ModelOutput(
        nn.softmax_row(a),
        probs,
        concat=concat,
        pre_kwta=z,
        kwta_mask=mask,
        traces=traces,
        model_id=id(model),
        combiner_version=model.combiner.version,
    )


def forward(model: EnsembleModel, x: np.ndarray, current_epoch: int | None = None) -> ModelOutput:
    """Dispatch to the forward pass of the model's family."""
    if model.family is Family.MOE:
        return forward_moe(model, x)
    if model.family is Family.KWTA:
        return forward_kwta(model, x, current_epoch)
    return forward_cooperative(model, x)


def _check_fresh(model: EnsembleModel, output: ModelOutput):
    if output.model_id != id(model):
        raise TraceError("output was produced by a different model")
    if len(output.traces) != model.n_subnets:
        raise TraceError("output does not hold one trace per sub-network")
    if model.combiner is not None and output.combiner_version != model.combiner.version:
        raise TraceError("combiner parameters changed since the forward pass")


def backward_for_family(model: EnsembleModel, output: ModelOutput, labels) -> float:
    """Accumulate exact gradients of the family's training loss; return the loss.

    Independent members are trained on their own cross-entropy (the returned
    loss is the mean over members); the other families train on the loss of
    their combined output.
    """
    _check_fresh(model, output)
    labels = np.asarray(labels)
    fam = model.family

    if fam is Family.INDEPENDENT:
        losses = []
        for net, p, t in zip(model.subnets, output.subnet_probs, output.traces):
            losses.append(nn.cross_entropy(p, labels))
            nn.mlp_backward(net, t, nn.cross_entropy_logit_grad(p, labels), wrt="logits")
        return float(np.mean(losses))

    if fam is Family.COOPERATIVE:
        loss = nn.cross_entropy(output.final_probs, labels)
        d_final = nn.cross_entropy_grad(output.final_probs, labels) / model.n_subnets
        for net, t in zip(model.subnets, output.traces):
            nn.mlp_backward(net, t, d_final, wrt="probs")
        return loss

    if fam is Family.MOE:
        return _moe_backward(model, output, labels)

    loss = nn.cross_entropy(output.final_probs, labels)
    d_act = nn.cross_entropy_logit_grad(output.final_probs, labels)
    d_z = d_act if output.kwta_mask is None else nn.kwta_backward(d_act, output.kwta_mask)
    comb = model.combiner
    comb.grads["wz"] += d_z.T @ output.concat
    comb.grads["bz"] += d_z.sum(axis=0)
    d_concat = d_z @ comb.wz
    c = model.n_classes
    for m, (net, t) in enumerate(zip(model.subnets, output.traces)):
        nn.mlp_backward(net, t, d_concat[:, m * c : (m + 1) * c], wrt=model.member_output)
    return loss


def _moe_backward(model: EnsembleModel, output: ModelOutput, labels: np.ndarray) -> float:
    if output.gate_trace is None or output.selected is None:
        raise TraceError("moe backward needs the gate trace from forward_moe")
    n = output.final_probs.shape[0]
    rows = np.arange(n)
    sel = output.selected
    gate_weight = output.gate_probs[rows, sel]
    ce = nn.cross_entropy_per_sample(output.final_probs, labels)
    loss = float(np.mean(gate_weight * ce))

    for m, (net, p, t) in enumerate(zip(model.subnets, output.subnet_probs, output.traces)):
        # Samples routed elsewhere contribute nothing to this expert.
        weights = np.where(sel == m, gate_weight, 0.0)
        nn.mlp_backward(net, t, nn.cross_entropy_logit_grad(p, labels, weights), wrt="logits")

    d_gate = np.zeros_like(output.gate_probs)
    d_gate[rows, sel] = ce / n
    nn.mlp_backward(model.gate, output.gate_trace, d_gate, wrt="probs")
    return loss


def moe_loss_and_grads(model: EnsembleModel, x: np.ndarray, labels) -> float:
    """Forward, then accumulate gradients of the gate-weighted expert loss."""
    _require(model, Family.MOE)
    return _moe_backward(model, forward_moe(model, x), np.asarray(labels))


# --- checkpoint files -------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
# then every array as little-endian float64 in row-major order, in header order.


def _named_arrays(model: EnsembleModel):
    for i, net in enumerate(model.subnets):
        for k, v in net.values.items():
            yield f"subnet{i}.{k}", v
    if model.gate is not None:
        for k, v in model.gate.values.items():
            yield f"gate.{k}", v
    if model.combiner is not None:
        for k, v in model.combiner.values.items():
            yield f"combiner.{k}", v


def save_model(model: EnsembleModel, path) -> None:
    arrays = list(_named_arrays(model))
    header = {
        "schema_version": CHECKPOINT_VERSION,
        "family": model.family.value,
        "in_dim": model.in_dim,
        "hidden_dim": model.hidden_dim,
        "n_classes": model.n_classes,
        "n_subnets": model.n_subnets,
        "k_frac": model.k_frac,
        "delay_epochs": model.delay_epochs,
        "member_output": model.member_output,
        "epoch": model.epoch,
        "arrays": [{"name": name, "shape": list(v.shape)} for name, v in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, v in arrays:
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_model(path) -> EnsembleModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:8]!r}")
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {header.get('schema_version')!r}")

    offset = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = math.prod(shape)
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"checkpoint truncated while reading {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after checkpoint payload")

    def mlp(prefix):
        try:
            return MlpParams(*(arrays[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2")))
        except KeyError as exc:
            raise CheckpointError(f"missing array {exc.args[0]}") from exc

    family = Family(header["family"])
    subnets = [mlp(f"subnet{i}") for i in range(header["n_subnets"])]
    gate = mlp("gate") if family is Family.MOE else None
    combiner = None
    if family is Family.KWTA:
        combiner = CombinerParams(arrays["combiner.wz"], arrays["combiner.bz"])
    try:
        model = EnsembleModel(
            family,
            subnets,
            gate=gate,
            combiner=combiner,
            k_frac=header["k_frac"],
            delay_epochs=header["delay_epochs"],
            member_output=header.get("member_output", "probs"),
            epoch=header["epoch"],
        )
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    for key in ("in_dim", "hidden_dim", "n_classes"):
        if getattr(model, key) != header[key]:
            raise CheckpointError(f"header {key}={header[key]} disagrees with stored arrays")
    return model
