import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safl.privacy import (
    PrivacyConfigError,
    PrivacyLedger,
    PrivacyParams,
    account,
    clip_blocks,
    clip_per_example,
    gaussian_epsilon,
    privatize_update,
)
from safl.tensor import RngStream


class TestParams:
    @pytest.mark.parametrize(
        "kw",
        [{"clip_norm": 0.0}, {"delta": 0.0}, {"delta": 1.0}, {"noise_multiplier": -1.0}, {"mode": "shuffle"}],
    )
    def test_invalid(self, kw):
        with pytest.raises(PrivacyConfigError):
            PrivacyParams(**kw)

    def test_noise_std(self):
        assert PrivacyParams(clip_norm=2.0, noise_multiplier=0.5).noise_std == 1.0


class TestClipping:
    def test_under_bound_untouched(self):
        g = np.array([0.3, 0.4])
        assert clip_per_example(g, 1.0) is g

    def test_over_bound_scaled(self):
        np.testing.assert_allclose(clip_per_example(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(1e-3, 10.0))
    def test_norm_never_exceeds(self, values, c):
        out = clip_per_example(np.array(values), c)
        assert np.linalg.norm(out) <= c * (1 + 1e-12)

    def test_joint_vs_per_layer(self):
        blocks = [np.array([3.0, 4.0]), np.array([0.0, 0.0, 12.0])]
        joint = clip_blocks(blocks, 1.0)
        assert math.isclose(np.linalg.norm(np.concatenate(joint)), 1.0)
        per = clip_blocks(blocks, 1.0, per_layer=True)
        for b in per:
            assert math.isclose(np.linalg.norm(b), 1 / math.sqrt(2))


class TestNoise:
    def test_disabled_is_plain_mean(self):
        s = np.arange(4.0)
        np.testing.assert_array_equal(privatize_update(s, 2, PrivacyParams(), RngStream(0, "n")), s / 2)

    def test_noise_std_matches(self):
        p = PrivacyParams(clip_norm=0.7, noise_multiplier=1.3, enabled=True)
        out = privatize_update(np.zeros(200_000), 1, p, RngStream(0, "n"))
        assert abs(out.std() / p.noise_std - 1) < 0.01

    def test_reproducible(self):
        p = PrivacyParams(enabled=True)
        a = privatize_update(np.zeros(5), 1, p, RngStream(3, "n"))
        np.testing.assert_array_equal(a, privatize_update(np.zeros(5), 1, p, RngStream(3, "n")))

    def test_bad_batch(self):
        with pytest.raises(ValueError):
            privatize_update(np.zeros(2), 0, PrivacyParams(), RngStream(0, "n"))


class TestLedger:
    def test_epsilon_formula(self):
        assert math.isclose(gaussian_epsilon(1.0, 1e-5), math.sqrt(2 * math.log(1.25e5)))
        assert gaussian_epsilon(0.0, 1e-5) == math.inf

    @pytest.mark.parametrize("rounds", [1, 7, 50, 100])
    def test_basic_composition_exact(self, rounds):
        p = PrivacyParams(enabled=True, noise_multiplier=1.1)
        led = PrivacyLedger()
        for _ in range(rounds):
            led = account(led, p)
        assert led.epsilon_total == rounds * gaussian_epsilon(1.1, 1e-5)
        assert led.rounds_elapsed == rounds

    def test_disabled_records_nothing(self):
        assert account(PrivacyLedger(), PrivacyParams()).rounds_elapsed == 0

    def test_account_does_not_mutate(self):
        led = PrivacyLedger()
        account(led, PrivacyParams(enabled=True))
        assert led.rounds_elapsed == 0

    def test_zero_sigma_is_infinite(self, tmp_path):
        led = account(PrivacyLedger(), PrivacyParams(enabled=True, noise_multiplier=0.0))
        assert led.epsilon_total == math.inf
        led.dump(tmp_path / "l.json")
        assert PrivacyLedger.load(tmp_path / "l.json").epsilon_total == math.inf

    def test_dump_load_roundtrip(self, tmp_path):
        led = PrivacyLedger()
        for _ in range(3):
            led = account(led, PrivacyParams(enabled=True, noise_multiplier=0.8))
        led.dump(tmp_path / "l.json")
        back = PrivacyLedger.load(tmp_path / "l.json")
        assert back.entries == led.entries
