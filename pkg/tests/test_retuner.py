import math
import warnings

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from hypertune.errors import EmptyPlateau, NoEvidence, ValidationError
from hypertune.monitor import MonitorState, StepReport, TerminateEpochAndRetune, observe
from hypertune.planner import DatasetSpec, NodeProfile, plan_initial
from hypertune.retuner import CPU, SPEED, RetunePolicy, apply_upscale, retune, upscale_check
from hypertune.speedmodel import SpeedModel, speed_at
from strategies import monotone_models

XEON = SpeedModel.from_pairs(
    [(20, 10.5), (40, 18.0), (60, 23.5), (80, 28.0), (98, 30.40666), (140, 30.625), (180, 31.5), (240, 31.5), (300, 31.5)],
    "xeon",
)
NODES = [NodeProfile(f"n{k}", "xeon", 8) for k in (1, 2, 3)]
DATA = DatasetSpec(300_000)


def setup(models=None, nodes=NODES):
    models = models or {"xeon": XEON}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyPlateau)
        plan = plan_initial(nodes, models, DATA)
    state = MonitorState(models, {n.node_id: n.node_class for n in nodes}, {n.node_id: float(n.core_count) for n in nodes})
    return plan, state, models


def drive(plan, state, alphas, start=10):
    """Run steps until termination; nodes in ``alphas`` run at that capacity fraction."""
    for step in range(start, plan.steps_per_epoch):
        rs = []
        for i, bs in plan.batch_sizes.items():
            a = alphas.get(i, 1.0)
            nominal = speed_at(state.models[state.node_classes[i]], bs)
            rs.append(StepReport(i, plan.generation, step, a * nominal, a * state.normal_cpu[i], 1.0))
        d = observe(state, rs, plan)
        if isinstance(d, TerminateEpochAndRetune):
            return d
    raise AssertionError("no termination")


class TestRetune:
    def test_four_and_six_core_batches(self):
        # speed fractions of the calibrated three-node fixture at batch 180
        for alpha, expected in ((25.2 / 31.5, 140), (0.564021164021164, 98)):
            plan, state, models = setup()
            d = drive(plan, state, {"n3": alpha})
            new = retune(plan, d, models, state, RetunePolicy(), DATA)
            assert new.batch_sizes["n3"] == expected
            assert abs(new.batch_sizes["n3"] - (140 if expected == 140 else 100)) <= 10
            assert new.batch_sizes["n1"] == new.batch_sizes["n2"] == 180
            assert new.generation == 1

    def test_full_speed_evidence_keeps_batch(self):
        plan, state, models = setup()
        d = drive(plan, state, {"n2": 0.5})
        state.reference_speed["n2"] = d.current_speed
        new = retune(plan, d, models, state, RetunePolicy(), DATA)
        assert new.batch_sizes["n2"] == 180

    def test_clamped_at_half_initial(self):
        plan, state, models = setup()
        d = drive(plan, state, {"n1": 0.05})
        new = retune(plan, d, models, state, RetunePolicy(), DATA)
        assert new.batch_sizes["n1"] == 90

    def test_clamp_range_is_configurable(self):
        plan, state, models = setup()
        d = drive(plan, state, {"n1": 0.05})
        new = retune(plan, d, models, state, RetunePolicy(clamp_low=0.25), DATA)
        assert new.batch_sizes["n1"] == 45

    def test_cpu_mode_uses_hint(self):
        plan, state, models = setup()
        d = drive(plan, state, {"n3": 0.25})
        new = retune(plan, d, models, state, RetunePolicy(mode=CPU, clamp_low=0.2), DATA)
        assert new.batch_sizes["n3"] == 45

    def test_naive_inverse(self):
        plan, state, models = setup()
        d = drive(plan, state, {"n3": 0.75})
        new = retune(plan, d, models, state, RetunePolicy(naive_inverse=True, clamp_low=0.3), DATA)
        # inverse of the nominal curve at 0.75 * 31.5 = 23.625 lies on the 60..80 segment
        assert new.batch_sizes["n3"] == round(60 + 20 * (23.625 - 23.5) / 4.5)

    def test_no_evidence(self):
        plan, state, models = setup()
        state.rebase(plan)
        with pytest.raises(NoEvidence):
            retune(plan, TerminateEpochAndRetune("n1", 1.0, 1.0, ()), models, state, RetunePolicy(), DATA)

    def test_policy_validation(self):
        with pytest.raises(ValidationError):
            RetunePolicy(clamp_low=1.2)
        with pytest.raises(ValidationError):
            RetunePolicy(mode="magic")


class TestUpscale:
    def _degraded(self):
        plan, state, models = setup()
        d = drive(plan, state, {"n3": 100 / 180})
        policy = RetunePolicy(mode=CPU)
        new = retune(plan, d, models, state, policy, DATA)
        assert new.batch_sizes["n3"] == 100
        return new, state, models, policy

    def _steps(self, plan, state, cpu, n=5):
        for step in range(n):
            rs = [StepReport(i, plan.generation, step, plan.capacity_of(i) * speed_at(XEON, bs),
                             cpu if i == "n3" else 8.0, 1.0)
                  for i, bs in plan.batch_sizes.items()]
            observe(state, rs, plan)

    def test_restores_initial_batch(self):
        plan, state, models, policy = self._degraded()
        self._steps(plan, state, 8.0)
        assert upscale_check(plan, state, policy) == {"n3": 180}
        up = apply_upscale(plan, {"n3": 180}, state, models, policy, DATA)
        assert up.batch_sizes["n3"] == 180 and up.generation == plan.generation + 1

    def test_nothing_at_initial_batch(self):
        plan, state, models = setup()
        self._steps(plan, state, 8.0)
        assert upscale_check(plan, state, RetunePolicy(mode=CPU)) is None

    def test_still_degraded(self):
        plan, state, models, policy = self._degraded()
        self._steps(plan, state, 0.6 * 8.0)
        assert upscale_check(plan, state, policy) is None

    def test_speed_mode_never_upscales(self):
        plan, state, models, _ = self._degraded()
        self._steps(plan, state, 8.0)
        assert upscale_check(plan, state, RetunePolicy(mode=SPEED)) is None


@st.composite
def degraded_clusters(draw):
    model = draw(monotone_models(min_knots=3, min_batch=8, node_class="x"))
    n = draw(st.integers(2, 6))
    nodes = [NodeProfile(f"n{k}", "x", 8) for k in range(n)]
    flagged = draw(st.sets(st.sampled_from([x.node_id for x in nodes]), min_size=1, max_size=n - 1))
    alphas = {i: draw(st.floats(0.1, 0.9)) for i in flagged}
    return model, nodes, alphas


@settings(max_examples=150, deadline=None)
@given(degraded_clusters(), st.sampled_from([SPEED, CPU]))
def test_clamp_safety_and_unflagged_preservation(case, mode):
    model, nodes, alphas = case
    plan, state, models = setup({"x": model}, nodes)
    assume(plan.steps_per_epoch > 20)
    d = drive(plan, state, alphas)
    new = retune(plan, d, models, state, RetunePolicy(mode=mode), DATA)
    for i, bs in new.batch_sizes.items():
        b0 = state.initial_batch[i]
        assert math.ceil(0.5 * b0 - 1e-9) <= bs <= math.floor(1.5 * b0 + 1e-9) or bs in (model.min_batch, model.max_batch)
        if i not in d.flagged_ids:
            assert bs == plan.batch_sizes[i]


@settings(max_examples=150, deadline=None)
@given(degraded_clusters())
def test_retune_never_worsens_straggler(case):
    model, nodes, alphas = case
    # step time must grow with batch size for shrinking to help
    times = [p.batch_size / p.throughput for p in model.points]
    assume(all(x <= y for x, y in zip(times, times[1:])))
    plan, state, models = setup({"x": model}, nodes)
    assume(plan.steps_per_epoch > 20)
    d = drive(plan, state, alphas)
    new = retune(plan, d, models, state, RetunePolicy(), DATA)
    for ev in d.flagged:
        a = alphas[ev.node_id]
        before = plan.batch_sizes[ev.node_id] / ev.current_speed
        bs = new.batch_sizes[ev.node_id]
        after = bs / (a * speed_at(model, bs))
        assert after <= before * (1 + 1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.5, 0.95))
def test_speed_and_cpu_modes_agree_on_uniform_scaling(alpha):
    out = {}
    for mode in (SPEED, CPU):
        plan, state, models = setup()
        d = drive(plan, state, {"n2": alpha})
        out[mode] = retune(plan, d, models, state, RetunePolicy(mode=mode), DATA).batch_sizes["n2"]
    assert abs(out[SPEED] - out[CPU]) <= 0.15 * max(out.values())
