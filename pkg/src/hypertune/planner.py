"""Initial batch sizing, dataset partitioning and replanning."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import EmptyPlateau, Infeasible, MissingModel, ValidationError
from .speedmodel import SpeedModel, equalize, has_plateau, plateau_start, round_half_up, speed_at


@dataclass(frozen=True)
class NodeProfile:
    node_id: str
    node_class: str
    core_count: int = 1
    is_storage_node: bool = False
    owned_private_samples: int = 0

    def __post_init__(self):
        if self.core_count < 1:
            raise ValidationError(f"{self.node_id}: core_count must be >= 1")
        if self.owned_private_samples < 0:
            raise ValidationError(f"{self.node_id}: owned_private_samples must be >= 0")


@dataclass(frozen=True)
class DatasetSpec:
    total_samples: int
    private_samples: Mapping[str, int] = field(default_factory=dict)
    public_samples: int | None = None

    def __post_init__(self):
        private = {k: int(v) for k, v in self.private_samples.items() if int(v) > 0}
        object.__setattr__(self, "private_samples", private)
        n_private = sum(private.values())
        if self.public_samples is None:
            object.__setattr__(self, "public_samples", self.total_samples - n_private)
        if self.total_samples < 1:
            raise ValidationError("total_samples must be positive")
        if self.public_samples < 0 or self.public_samples + n_private != self.total_samples:
            raise ValidationError(
                f"public ({self.public_samples}) + private ({n_private}) != total ({self.total_samples})"
            )

    @classmethod
    def for_nodes(cls, total_samples: int, nodes: Sequence[NodeProfile]) -> "DatasetSpec":
        return cls(total_samples, {n.node_id: n.owned_private_samples for n in nodes})

    def private_ranges(self) -> dict[str, range]:
        """Sample-id ranges of each owner's private data; public ids follow."""
        out, start = {}, 0
        for node_id, count in self.private_samples.items():
            out[node_id] = range(start, start + count)
            start += count
        return out

    def public_range(self) -> range:
        start = self.total_samples - self.public_samples
        return range(start, self.total_samples)


@dataclass(frozen=True)
class BatchPlan:
    generation: int
    batch_sizes: Mapping[str, int]
    dataset_shares: Mapping[str, int]
    steps_per_epoch: int
    predicted_step_time: float
    # estimated fraction of nominal speed each node currently delivers
    capacity: Mapping[str, float] = field(default_factory=dict)

    @property
    def node_ids(self) -> list[str]:
        return list(self.batch_sizes)

    @property
    def total_batch(self) -> int:
        return sum(self.batch_sizes.values())

    def capacity_of(self, node_id: str) -> float:
        return self.capacity.get(node_id, 1.0)

    def share_offsets(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for node_id, n in self.dataset_shares.items():
            out[node_id] = (start, n)
            start += n
        return out


def _check_models(nodes, models):
    for n in nodes:
        if n.node_class not in models:
            raise MissingModel(f"no speed model for class {n.node_class!r} (node {n.node_id})")


def select_anchor(nodes: Sequence[NodeProfile], models: Mapping[str, SpeedModel]) -> str:
    """Node class with the largest peak throughput x device count."""
    if not nodes:
        raise ValidationError("cluster has no nodes")
    _check_models(nodes, models)
    counts: dict[str, int] = {}
    for n in nodes:
        counts[n.node_class] = counts.get(n.node_class, 0) + 1
    return min(
        counts,
        key=lambda c: (-models[c].peak * counts[c], -models[c].peak, c),
    )


def node_step_time(plan: BatchPlan, node: NodeProfile, models: Mapping[str, SpeedModel]) -> float:
    bs = plan.batch_sizes[node.node_id]
    return bs / (plan.capacity_of(node.node_id) * speed_at(models[node.node_class], bs))


def partition(
    batch_sizes: Mapping[str, int],
    dataset: DatasetSpec,
    privacy_slack: int = 0,
) -> tuple[dict[str, int], int]:
    """Proportional dataset shares (largest-remainder rounding) and steps/epoch."""
    total_batch = sum(batch_sizes.values())
    if total_batch < 1 or any(b < 1 for b in batch_sizes.values()):
        raise ValidationError("batch sizes must be positive")
    D = dataset.total_samples
    steps = D // total_batch
    if steps < 1:
        raise ValidationError(f"dataset of {D} samples is smaller than one step ({total_batch})")
    unknown = set(dataset.private_samples) - set(batch_sizes)
    if unknown:
        raise ValidationError(f"private data owned by nodes outside the plan: {sorted(unknown)}")

    ids = list(batch_sizes)
    # exact integer arithmetic for floors and remainders
    floors = [batch_sizes[i] * D // total_batch for i in ids]
    rems = [batch_sizes[i] * D % total_batch for i in ids]
    residue = D - sum(floors)
    order = sorted(range(len(ids)), key=lambda k: (-rems[k], k))
    for k in order[:residue]:
        floors[k] += 1
    shares = dict(zip(ids, floors))

    deficits = {}
    for node_id, owned in dataset.private_samples.items():
        gap = owned - shares[node_id]
        if gap > 0:
            if gap > privacy_slack:
                raise Infeasible(
                    node_id,
                    f"node {node_id} owns {owned} private samples but its share is "
                    f"{shares[node_id]} (short by {gap}, slack {privacy_slack})",
                )
            deficits[node_id] = gap
    for node_id, gap in deficits.items():
        for _ in range(gap):
            donor = max(
                (i for i in ids if i not in deficits),
                key=lambda i: (shares[i] - dataset.private_samples.get(i, 0), -ids.index(i)),
                default=None,
            )
            if donor is None or shares[donor] - dataset.private_samples.get(donor, 0) <= 0:
                raise Infeasible(node_id, f"not enough public samples to pin {node_id}'s data")
            shares[donor] -= 1
            shares[node_id] += 1
    return shares, steps


def plan_initial(
    nodes: Sequence[NodeProfile],
    models: Mapping[str, SpeedModel],
    dataset: DatasetSpec,
    *,
    literal: bool = False,
    privacy_slack: int = 0,
) -> BatchPlan:
    """Generation-0 plan: anchor class at its plateau start, others equalized."""
    anchor = select_anchor(nodes, models)
    ids = [n.node_id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ValidationError("node ids must be unique")
    amodel = models[anchor]
    if not has_plateau(amodel):
        warnings.warn(
            f"anchor class {anchor!r} has no throughput plateau; using largest probed batch",
            EmptyPlateau,
            stacklevel=2,
        )
    anchor_bs = plateau_start(amodel)
    T = anchor_bs / speed_at(amodel, anchor_bs)

    batch_sizes: dict[str, int] = {}
    per_class: dict[str, int] = {anchor: anchor_bs}
    for n in nodes:
        if n.node_class not in per_class:
            per_class[n.node_class] = max(1, round_half_up(equalize(models[n.node_class], T, literal)))
        batch_sizes[n.node_id] = per_class[n.node_class]

    shares, steps = partition(batch_sizes, dataset, privacy_slack)
    step_times = [batch_sizes[n.node_id] / speed_at(models[n.node_class], batch_sizes[n.node_id]) for n in nodes]
    return BatchPlan(
        generation=0,
        batch_sizes=batch_sizes,
        dataset_shares=shares,
        steps_per_epoch=steps,
        predicted_step_time=max(step_times),
        capacity={i: 1.0 for i in ids},
    )


def replan(
    previous: BatchPlan,
    new_batch_sizes: Mapping[str, int],
    dataset: DatasetSpec,
    *,
    capacity: Mapping[str, float] | None = None,
    predicted_step_time: float | None = None,
    privacy_slack: int = 0,
) -> BatchPlan:
    """Next-generation plan with shares and steps recomputed for new batches."""
    missing = set(previous.batch_sizes) - set(new_batch_sizes)
    if missing:
        raise ValidationError(f"new batch sizes missing nodes: {sorted(missing)}")
    ordered = {i: int(new_batch_sizes[i]) for i in previous.batch_sizes}
    shares, steps = partition(ordered, dataset, privacy_slack)
    cap = dict(previous.capacity)
    if capacity:
        cap.update(capacity)
    return BatchPlan(
        generation=previous.generation + 1,
        batch_sizes=ordered,
        dataset_shares=shares,
        steps_per_epoch=steps,
        predicted_step_time=(
            previous.predicted_step_time if predicted_step_time is None else predicted_step_time
        ),
        capacity=cap,
    )


def predict_step_time(
    batch_sizes: Mapping[str, int],
    capacity: Mapping[str, float],
    nodes: Sequence[NodeProfile],
    models: Mapping[str, SpeedModel],
) -> float:
    return max(
        batch_sizes[n.node_id] / (capacity.get(n.node_id, 1.0) * speed_at(models[n.node_class], batch_sizes[n.node_id]))
        for n in nodes
    )


def relative_skew(plan: BatchPlan, nodes: Sequence[NodeProfile], models: Mapping[str, SpeedModel], T: float | None = None) -> float:
    """max_i |t_i - T| / T over the plan's nodes (T defaults to the anchor step time)."""
    if T is None:
        anchor = select_anchor(nodes, models)
        bs = plateau_start(models[anchor])
        T = bs / speed_at(models[anchor], bs)
    return max(math.fabs(node_step_time(plan, n, models) - T) / T for n in nodes)
