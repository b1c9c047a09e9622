import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import chain_mdp, random_policy
from mvmdp.evaluation import simulate_rewards
from mvmdp.mdp import (ModelError, Stage, TabularMdp, ensure_valid, from_document, load,
                       pseudo_mean_domain, save, to_document, validate)
from mvmdp.models import build_random
from mvmdp.policies import MixedPolicy


def two_state(row=(0.5, 0.5), admissible=None):
    kernel = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.3, 0.7], list(row)]])
    reward = np.array([[1.0, 0.0], [0.5, -1.0]])
    return TabularMdp.from_tables([kernel] * 2, [reward] * 2, 1.0, admissible)


def same_model(a, b):
    assert (a.horizon, a.num_states, a.num_actions) == (b.horizon, b.num_states, b.num_actions)
    assert a.risk_aversion == b.risk_aversion
    np.testing.assert_array_equal(a.admissible, b.admissible)
    for sa, sb in zip(a.stages, b.stages):
        for name in ("post_state", "decision_reward", "ptr", "next_state", "prob", "reward"):
            x, y = getattr(sa, name), getattr(sb, name)
            assert x.dtype == y.dtype
            assert x.tobytes() == y.tobytes()


class TestValidate:
    def test_well_formed(self):
        report = validate(two_state())
        assert report.ok
        assert report.violations == []

    def test_row_mass(self):
        report = validate(two_state(row=(0.4, 0.5)))
        assert not report.ok
        assert any("row mass 0.9 ≠ 1" in v for v in report.violations)

    def test_empty_admissible_set(self):
        report = validate(two_state(admissible=[[True, True], [False, False]]))
        assert "A(1) empty" in report.violations

    def test_negative_probability_and_lambda(self):
        kernel = np.array([[[1.2, -0.2]], [[0.0, 1.0]]])
        mdp = TabularMdp.from_tables([kernel], [np.zeros((2, 1))], -1.0)
        report = validate(mdp)
        assert any("negative probability" in v for v in report.violations)
        assert any("lambda" in v for v in report.violations)

    def test_ensure_valid_raises(self):
        with pytest.raises(ModelError, match="row mass"):
            ensure_valid(two_state(row=(0.4, 0.5)))

    def test_random_models_are_valid(self):
        for seed in range(20):
            assert validate(build_random(seed, (3, 3, 3), outcome_rewards=bool(seed % 2))).ok


class TestDomain:
    def test_inventory(self, inventory):
        assert pseudo_mean_domain(inventory) == (-300.0, 400.0)

    def test_queueing(self, queueing):
        assert pseudo_mean_domain(queueing) == (-44.0, 0.0)

    def test_queueing_from_mid_workload(self, queueing):
        lo, hi = pseudo_mean_domain(queueing, 600)
        assert lo == pytest.approx(-44.0)
        assert hi <= 0.0

    def test_zero_rewards(self):
        assert pseudo_mean_domain(chain_mdp((0.0,))) == (0.0, 0.0)

    def test_bounds_contain_every_reward(self):
        mdp = build_random(3, (3, 3, 3), outcome_rewards=True)
        lo, hi = mdp.reward_bounds
        for stage in mdp.stages:
            r = stage.expected_reward()[mdp.admissible]
            assert lo - 1e-12 <= r.min() and r.max() <= hi + 1e-12


class TestKernel:
    def test_marginal_kernel_rows(self):
        mdp = build_random(5, (3, 2, 2), outcome_rewards=True)
        for stage in mdp.stages:
            k = stage.kernel(mdp.num_states).toarray().reshape(3, 2, 3)
            np.testing.assert_allclose(k[mdp.admissible].sum(axis=1), 1.0, atol=1e-12)
            assert np.all(k[~mdp.admissible] == 0)

    def test_outcomes_of_inadmissible_pair(self, inventory):
        with pytest.raises(ModelError):
            inventory.stages[0].outcomes(10, 1)


class TestDocuments:
    def test_roundtrip_builtin(self, inventory, tmp_path):
        path = tmp_path / "m.json"
        save(inventory, path)
        same_model(inventory, load(path))

    def test_atom_form_same_outcomes(self, inventory, tmp_path):
        path = tmp_path / "m.json"
        save(inventory, path, noise_atoms=True)
        back = load(path)
        np.testing.assert_array_equal(back.admissible, inventory.admissible)
        for t in range(inventory.horizon):
            for s, a in zip(*np.nonzero(inventory.admissible)):
                for x, y in zip(inventory.stages[t].outcomes(s, a), back.stages[t].outcomes(s, a)):
                    np.testing.assert_array_equal(x, y)

    def test_roundtrip_tabular(self, tmp_path):
        mdp = two_state()
        path = tmp_path / "m.json"
        save(mdp, path)
        doc = json.loads(path.read_text())
        assert doc["schema"] == "mvmdp-model/1"
        same_model(mdp, load(path))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), outcome=st.booleans())
    def test_roundtrip_random(self, seed, outcome):
        mdp = build_random(seed, (3, 3, 2), outcome_rewards=outcome)
        same_model(mdp, from_document(json.loads(json.dumps(to_document(mdp)))))

    def test_decimal_string_probabilities(self):
        doc = to_document(two_state())
        text = json.dumps(doc).replace("0.3", '"0.3"').replace("0.7", '"0.7"')
        same_model(two_state(), from_document(json.loads(text)))

    def test_malformed_document(self):
        doc = to_document(two_state())
        del doc["horizon"]
        with pytest.raises(ModelError):
            from_document(doc)


class TestPolicies:
    def test_view_matches_augmented_chain(self):
        mdp = build_random(11, (3, 3, 3), outcome_rewards=True)
        rng = np.random.default_rng(0)
        pol = random_policy(mdp, 0, 1.5, rng)
        view = pol.view()
        for _ in range(200):
            s, y, past = 0, 1.5, ()
            for t in range(mdp.horizon):
                a = view.action(s, past)
                assert a == pol.action(t, s, y)
                nxt, prob, rew = mdp.stages[t].outcomes(s, a)
                o = rng.choice(len(prob), p=prob)
                s, y, past = int(nxt[o]), y - rew[o], past + (float(rew[o]),)

    def test_equal_views_agree(self):
        mdp = build_random(2, (3, 2, 2))
        pol = random_policy(mdp, 0, 0.0, np.random.default_rng(1))
        a, b = pol.view(0.0), pol.view(0.0)
        for past in [(), (0.5,), (1.0,)]:
            for s in range(3):
                try:
                    assert a.action(s, past) == b.action(s, past)
                except LookupError:
                    continue

    def test_simulation_reproducible(self):
        mdp = build_random(4, (3, 3, 3), outcome_rewards=True)
        pol = random_policy(mdp, 0, 1.0, np.random.default_rng(2))
        x = simulate_rewards(mdp, pol, 0, 5000, seed=9)
        np.testing.assert_array_equal(x, simulate_rewards(mdp, pol.view(), 0, 5000, seed=9))

    def test_mixed_policy_weight(self):
        mdp = chain_mdp()
        pol = random_policy(mdp, 0, 3.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            MixedPolicy(pol, pol, 1.5)
        with pytest.raises(ValueError):
            MixedPolicy(pol, pol, 0.5, mode="stage")

    def test_stage_arrays_are_frozen(self, inventory):
        with pytest.raises(ValueError):
            inventory.stages[0].prob[0] = 1.0
        assert isinstance(inventory.stages[0], Stage)
