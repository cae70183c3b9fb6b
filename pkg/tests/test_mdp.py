import math

import numpy as np
import pytest

from database.schema.models import MdpInstance
from lib import mdp
from lib.distributions import make_distribution
from utils.errors import EmptyUpperTailError, InvalidMdpError, SizeBoundExceededError, SupportMismatchError


def _instance(**overrides) -> MdpInstance:
    payload = {
        "states": ["s", "l", "r"],
        "actions": ["0", "1"],
        "transitions": {"s": {"0": "l", "1": "r"}},
        "start": {"s": 1.0},
        "sinks": ["l", "r"],
        "returns": {"l": {"atoms": [0.0]}, "r": {"atoms": [1.0, 9.0], "weights": [0.5, 0.5]}},
        "max_depth": 1,
    }
    payload.update(overrides)
    return MdpInstance.model_validate(payload)


@pytest.fixture
def chain():
    return mdp.token_chain(alphabet=3, max_length=5)


@pytest.fixture
def banded(chain):
    policy = mdp.Policy.uniform(chain)
    return mdp.assign_band_returns(chain, policy, make_distribution("pareto:1.5"), atoms=64, seed=3), policy


class TestDmrmdpValidation:
    def test_from_instance(self):
        model = mdp.Dmrmdp.from_instance(_instance())
        assert model.g(("s", "1", "r")) == pytest.approx(5.0)
        assert model.trajectory_count_bound() == 2

    def test_cycle_rejected(self):
        with pytest.raises(InvalidMdpError):
            mdp.Dmrmdp.from_instance(
                _instance(
                    states=["s", "l", "r"],
                    transitions={"s": {"0": "l", "1": "l"}, "l": {"0": "s", "1": "s"}},
                    sinks=["r"],
                    returns={"r": {"atoms": [0.0]}},
                    max_depth=5,
                )
            )

    def test_missing_action(self):
        with pytest.raises(InvalidMdpError):
            mdp.Dmrmdp.from_instance(_instance(transitions={"s": {"0": "l"}}))

    def test_sink_without_return(self):
        with pytest.raises(InvalidMdpError):
            mdp.Dmrmdp.from_instance(_instance(returns={"l": {"atoms": [0.0]}}))

    def test_start_on_sink(self):
        with pytest.raises(InvalidMdpError):
            mdp.Dmrmdp.from_instance(_instance(start={"l": 1.0}))

    def test_depth_exceeded(self):
        with pytest.raises(InvalidMdpError):
            mdp.Dmrmdp.from_instance(
                _instance(
                    states=["s", "m", "l"],
                    transitions={"s": {"0": "m", "1": "m"}, "m": {"0": "l", "1": "l"}},
                    sinks=["l"],
                    returns={"l": {"atoms": [0.0]}},
                    max_depth=1,
                )
            )

    def test_instance_round_trip(self, chain):
        policy = mdp.Policy.uniform(chain)
        rebuilt = mdp.Dmrmdp.from_instance(MdpInstance.model_validate_json(chain.to_instance(policy).model_dump_json()))
        assert rebuilt.states == chain.states
        assert rebuilt.sinks == chain.sinks


class TestTrajectories:
    def test_token_chain_count(self, chain):
        dist = mdp.enumerate_trajectories(chain, mdp.Policy.uniform(chain))
        assert len(dist) == 63
        assert dist.total() == pytest.approx(1.0)

    def test_size_cap(self, chain):
        with pytest.raises(SizeBoundExceededError):
            mdp.enumerate_trajectories(chain, mdp.Policy.uniform(chain), max_trajectories=10)

    def test_sampling_matches_enumeration(self):
        model = mdp.Dmrmdp.from_instance(_instance())
        policy = mdp.Policy.from_dict(model, {"s": {"0": 0.25, "1": 0.75}})
        sampled = mdp.sample_trajectories(model, policy, 20_000, np.random.default_rng(5))
        assert sampled.measure[("s", "1", "r")] == pytest.approx(0.75, abs=0.02)

    def test_return_distribution(self):
        model = mdp.Dmrmdp.from_instance(_instance())
        dist = mdp.enumerate_trajectories(model, mdp.Policy.uniform(model))
        returns = mdp.return_distribution(model, dist)
        assert returns.atoms.tolist() == [0.0, 1.0, 9.0]
        assert returns.weights.tolist() == pytest.approx([0.5, 0.25, 0.25])
        assert mdp.expected_return(model, dist) == pytest.approx(2.5)
        assert mdp.mean_return_distribution(model, dist).atoms.tolist() == [0.0, 5.0]


class TestLifting:
    def test_tree_lift_is_exact(self, banded):
        chain, policy = banded
        base = mdp.enumerate_trajectories(chain, policy)
        levels = sorted({chain.g(tau) for tau in base.measure})
        rho = mdp.upweight_trajectories(chain, base, 1.0, (levels[-2] + levels[-1]) / 2)
        lifted = mdp.enumerate_trajectories(chain, mdp.lift_policy(chain, rho, policy))
        assert mdp.total_variation(lifted, rho) < 1e-10

    def test_round_trip(self, chain):
        policy = mdp.Policy.random(chain, np.random.default_rng(1))
        dist = mdp.enumerate_trajectories(chain, policy)
        relifted = mdp.enumerate_trajectories(chain, mdp.lift_policy(chain, dist))
        assert mdp.total_variation(relifted, dist) < 1e-10

    def test_merge_chain_loses_history(self):
        merge = mdp.merge_chain(n_actions=2, depth=3)
        policy = mdp.Policy.uniform(merge)
        base = mdp.enumerate_trajectories(merge, policy)
        factors = {tau: 5.0 for tau in base.measure if tau[1] == "1" and tau[-2] == "1"}
        target = mdp.reweight_trajectories(base, factors)
        relifted = mdp.enumerate_trajectories(merge, mdp.lift_policy(merge, target, policy))
        assert mdp.total_variation(relifted, target) > 1e-6

    def test_upweight_needs_upper_tail(self, banded):
        chain, policy = banded
        base = mdp.enumerate_trajectories(chain, policy)
        top = max(chain.g(tau) for tau in base.measure)
        with pytest.raises(EmptyUpperTailError):
            mdp.upweight_trajectories(chain, base, 1.0, top + 1.0)


class TestDivergences:
    def test_chain_rule(self, banded):
        chain, policy = banded
        p = mdp.enumerate_trajectories(chain, mdp.Policy.random(chain, np.random.default_rng(2)))
        q = mdp.enumerate_trajectories(chain, policy)
        rule = mdp.kl_chain_rule(chain, p, q)
        assert abs(rule["residual"]) < 1e-10
        assert rule["total"] == pytest.approx(mdp.trajectory_kl(p, q))

    @pytest.fixture
    def upweighted(self, banded):
        chain, policy = banded
        base = mdp.enumerate_trajectories(chain, policy)
        levels = sorted({chain.g(tau) for tau in base.measure})
        rho = mdp.upweight_trajectories(chain, base, 1.0, (levels[-2] + levels[-1]) / 2)
        return chain, policy, base, rho

    def test_upweighting_has_no_conditional_term(self, upweighted):
        chain, _, base, rho = upweighted
        rule = mdp.kl_chain_rule(chain, rho, base)
        assert rule["conditional"] == pytest.approx(0.0, abs=1e-10)
        assert rule["total"] == pytest.approx(rule["marginal"], abs=1e-10)

    def test_trajectory_kl_equals_return_law_kl(self, upweighted):
        chain, _, base, rho = upweighted
        p = mdp.mean_return_distribution(chain, rho)
        q = mdp.mean_return_distribution(chain, base)
        q_mass = dict(zip(q.atoms.tolist(), q.weights.tolist()))
        pushed = math.fsum(w * math.log(w / q_mass[g]) for g, w in zip(p.atoms.tolist(), p.weights.tolist()) if w > 0)
        assert mdp.trajectory_kl(rho, base) == pytest.approx(pushed, rel=1e-9)

    def test_per_state_terms_bound_trajectory_kl(self, upweighted):
        chain, policy, base, rho = upweighted
        lifted = mdp.lift_policy(chain, rho, policy)
        terms = mdp.policy_kl_terms(chain, lifted, policy)
        assert terms["per_state_sum"] == pytest.approx(mdp.trajectory_kl(rho, base), rel=1e-8)
        assert terms["per_state_average"] <= terms["per_state_sum"] + 1e-15

    def test_same_policy_zero_kl(self, chain):
        policy = mdp.Policy.uniform(chain)
        terms = mdp.policy_kl_terms(chain, policy, policy)
        assert terms["per_state_sum"] == pytest.approx(0.0, abs=1e-12)

    def test_support_mismatch(self, chain):
        greedy = mdp.Policy.deterministic(chain, "1")
        uniform = mdp.enumerate_trajectories(chain, mdp.Policy.uniform(chain))
        with pytest.raises(SupportMismatchError):
            mdp.trajectory_kl(uniform, mdp.enumerate_trajectories(chain, greedy))
        with pytest.raises(SupportMismatchError):
            mdp.policy_kl_terms(chain, mdp.Policy.uniform(chain), greedy)


class TestGoodhartSearch:
    def test_finds_policy(self, banded):
        chain, policy = banded
        search = mdp.goodhart_policy_search(chain, policy, target_mean=5.0, kl_budget=0.1)
        assert search.found is not None
        assert search.found["mean_return"] > 5.0
        assert search.found["per_state_average"] < 0.1
        assert (search.table["lift_tv"] < 1e-10).all()

    def test_band_returns_cover_sinks(self, banded):
        chain, _ = banded
        assert all(chain.returns[s].atoms.size == 64 for s in chain.sinks)
