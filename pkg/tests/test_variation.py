"""Variation tests: sub-stream determinism, sampling statistics, tile
perturbation, and the distinguishable-states merging analysis."""

import numpy as np
import pytest

from cimcube.device_models import InvalidInputError, program_to_level
from cimcube.tile import Tile, TileGeometry
from cimcube.variation import (
    STREAM_DEVICE,
    STREAM_MC,
    VariationSpec,
    distinguishable_states,
    perturb_tile,
    sample_d2d,
    state_merging_report,
    substream,
)


class TestSampling:
    def test_zero_sigma_is_exact_ones(self):
        f = sample_d2d(VariationSpec(sigma_d2d=0.0), 1000)
        assert np.array_equal(f, np.ones(1000))

    def test_deterministic_per_seed(self):
        spec = VariationSpec(sigma_d2d=0.1, seed=42)
        assert np.array_equal(sample_d2d(spec, 100), sample_d2d(spec, 100))
        other = VariationSpec(sigma_d2d=0.1, seed=43)
        assert not np.array_equal(sample_d2d(spec, 100), sample_d2d(other, 100))

    def test_substreams_are_independent(self):
        a = substream(0, STREAM_DEVICE).random(10)
        b = substream(0, STREAM_MC).random(10)
        assert not np.array_equal(a, b)

    def test_lognormal_statistics_law_of_large_numbers(self):
        spec = VariationSpec(sigma_d2d=0.1, seed=0)
        f = sample_d2d(spec, 1_000_000)
        logs = np.log(f)
        assert abs(logs.mean()) < 1e-3
        assert abs(logs.std() - 0.1) < 2e-3
        assert np.all(f > 0)

    def test_gaussian_clamped_statistics(self):
        spec = VariationSpec(sigma_d2d=0.1, seed=0,
                             distribution="gaussian-clamped")
        f = sample_d2d(spec, 1_000_000)
        assert abs(f.mean() - 1.0) < 1e-3
        assert abs(f.std() - 0.1) < 2e-3
        assert np.all(f > 0)

    def test_invalid_spec_rejected(self):
        with pytest.raises(InvalidInputError):
            VariationSpec(sigma_d2d=-0.1)
        with pytest.raises(InvalidInputError):
            VariationSpec(distribution="cauchy")
        with pytest.raises(InvalidInputError):
            sample_d2d(VariationSpec(), 0)


class TestPerturbTile:
    def test_gaps_and_levels_untouched(self, tft, rram):
        tile = Tile.uniform(TileGeometry(), tft, rram, program_to_level(rram, 9))
        out = perturb_tile(tile, VariationSpec(sigma_d2d=0.2, seed=3))
        assert np.array_equal(out.gaps, tile.gaps)
        assert np.array_equal(out.levels, tile.levels)
        assert not np.array_equal(out.d2d, tile.d2d)
        assert np.all(out.d2d > 0)

    def test_deterministic(self, tft, rram):
        tile = Tile.uniform(TileGeometry(), tft, rram, program_to_level(rram, 9))
        spec = VariationSpec(sigma_d2d=0.2, seed=3)
        a = perturb_tile(tile, spec)
        b = perturb_tile(tile, spec)
        assert np.array_equal(a.d2d, b.d2d)


class TestDistinguishableStates:
    def test_no_variation_keeps_all_levels(self, rram):
        assert distinguishable_states(rram, VariationSpec(sigma_d2d=0.0)) == \
            rram.n_levels

    def test_monotone_nonincreasing_in_sigma(self, rram):
        counts = [distinguishable_states(rram, VariationSpec(sigma_d2d=s, seed=0))
                  for s in (0.0, 0.02, 0.05, 0.1, 0.2)]
        assert counts[0] == rram.n_levels
        assert all(b <= a for a, b in zip(counts, counts[1:]))
        assert counts[-1] >= 2

    def test_group_ids_contiguous_and_ordered(self, rram):
        count, mu, sd, groups = distinguishable_states(
            rram, VariationSpec(sigma_d2d=0.1, seed=0), return_stats=True)
        assert np.all(np.diff(groups) >= 0)
        assert np.all(np.diff(groups) <= 1)
        assert groups[0] == 0 and groups[-1] == count - 1
        assert np.all(np.diff(mu) > 0)      # nominal ordering survives MC noise

    def test_too_few_devices_rejected(self, rram):
        with pytest.raises(InvalidInputError):
            distinguishable_states(rram, VariationSpec(), n_mc=100)

    def test_report_csv_consistent(self, rram):
        spec = VariationSpec(sigma_d2d=0.05, seed=0)
        text = state_merging_report(rram, spec)
        lines = text.strip().splitlines()
        assert lines[0] == "level,mean_current,std_current,group_id"
        assert len(lines) == 1 + rram.n_levels
        groups = [int(l.split(",")[3]) for l in lines[1:]]
        assert groups[-1] + 1 == distinguishable_states(rram, spec)

    def test_deterministic_per_seed(self, rram):
        spec = VariationSpec(sigma_d2d=0.1, seed=5)
        assert state_merging_report(rram, spec) == state_merging_report(rram, spec)
