import numpy as np
import pytest

from undermap import synth
from undermap.analyze import contextual_encoding
from undermap.geodata import BoundingBox

BOX = BoundingBox(10.0, 40.0, 0.1, 0.1)


def one_region(dist, density=100.0, rect=(10.0, 40.0, 10.05, 40.02)):
    reg = synth.PlantedRegionSpec((rect,), np.asarray(dist, dtype=float), density)
    return synth.PlantedCity(BOX, len(dist), (reg,))


def test_point_mass_distribution():
    ds, _ = synth.generate_city(one_region(np.eye(6)[3]), seed=0)
    assert set(ds.styles.tolist()) == {3}


def test_poisson_count_bound():
    spec = one_region(np.full(4, 0.25))  # 0.05 x 0.02 = 10 cells
    ds, _ = synth.generate_city(spec, seed=1)
    assert spec.expected_counts()[0] == pytest.approx(1000)
    assert abs(len(ds) - 1000) <= 3 * np.sqrt(1000)


def test_style_frequencies_within_multinomial_bound():
    p = np.array([0.5, 0.2, 0.2, 0.1])
    ds, _ = synth.generate_city(one_region(p, density=500), seed=2)
    n = len(ds)
    counts = np.bincount(ds.styles, minlength=4)
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_records_inside_their_region_and_reproducible():
    spec = synth.planted_spec(BOX, 8, seed=4, density=30)
    ds, truth = synth.generate_city(spec, seed=4)
    region_of = spec.ground_truth(ds.lons, ds.lats)
    from_id = np.array([int(r.id.split("-")[1]) for r in ds.records])
    assert np.array_equal(region_of, from_id)
    again, truth2 = synth.generate_city(spec, seed=4)
    assert again.records == ds.records and dict(truth2.cells) == dict(truth.cells)
    other, _ = synth.generate_city(spec, seed=5)
    assert other.records != ds.records


def test_invalid_specs():
    d = np.full(3, 1 / 3)
    with pytest.raises(ValueError):
        synth.PlantedRegionSpec(((0, 0, 1, 1),), np.array([0.5, 0.6]), 1.0)
    with pytest.raises(ValueError):
        synth.PlantedRegionSpec(((0, 0, 1, 1),), d, 0.0)
    a = synth.PlantedRegionSpec(((10.0, 40.0, 10.05, 40.05),), d, 1.0)
    b = synth.PlantedRegionSpec(((10.04, 40.0, 10.1, 40.05),), d, 1.0)
    with pytest.raises(ValueError, match="overlap"):
        synth.PlantedCity(BOX, 3, (a, b))
    outside = synth.PlantedRegionSpec(((9.0, 40.0, 10.05, 40.05),), d, 1.0)
    with pytest.raises(ValueError, match="bounding box"):
        synth.PlantedCity(BOX, 3, (outside,))
    # touching rectangles are fine (half-open)
    c = synth.PlantedRegionSpec(((10.05, 40.0, 10.1, 40.05),), d, 1.0)
    assert len(synth.PlantedCity(BOX, 3, (a, c)).regions) == 2


def test_truth_grid_matches_regions():
    spec = synth.planted_spec(BOX, 5, seed=0)
    truth = synth.truth_grid(spec)
    assert truth.granularity == 0.01 and len(truth.cells) == 100
    assert len(truth.label_names) == 4
    for (c, r), lab in truth.cells.items():
        lon, lat = truth.cell_center(c, r)
        assert spec.ground_truth(lon, lat) == lab


def test_split_twin_contract():
    spec = synth.split_twin_spec(BoundingBox(10.0, 40.0, 0.3, 0.3), 20, seed=1)
    assert len(spec.regions) == 4
    np.testing.assert_array_equal(spec.regions[0].distribution, spec.regions[2].distribution)
    assert not np.array_equal(spec.regions[0].distribution, spec.regions[1].distribution)
    truth = synth.truth_grid(spec)
    sw = truth.cells[(0, 0)]
    ne = truth.cells[(29, 29)]
    se = truth.cells[(29, 0)]
    nw = truth.cells[(0, 29)]
    assert sw == ne and len({sw, se, nw}) == 3


def test_split_twin_needs_room():
    with pytest.raises(ValueError):
        synth.split_twin_spec(BoundingBox(0.0, 0.0, 0.01, 0.01), 5)


def _expected_city_mean(spec):
    w = spec.expected_counts()
    return (w[:, None] * np.stack([r.distribution for r in spec.regions])).sum(0) / w.sum()


@pytest.mark.parametrize("seed", range(5))
def test_shifted_pair_contract(seed):
    base = synth.planted_spec(BoundingBox(0.0, 0.0, 0.2, 0.2), 20, seed=seed)
    a, b = synth.shifted_city_pair(base, shift=0.5, seed=seed)
    ea = contextual_encoding(a.regions[0].distribution, _expected_city_mean(a))
    eb = contextual_encoding(b.regions[0].distribution, _expected_city_mean(b))
    assert np.array_equal(ea, eb)
    assert np.count_nonzero(ea) >= 19
    analog_l1 = np.abs(a.regions[0].distribution - b.regions[0].distribution).sum()
    confound_l1 = np.abs(a.regions[0].distribution - b.regions[1].distribution).sum()
    assert analog_l1 > confound_l1
    for r in a.regions[1:]:
        assert not np.allclose(r.distribution, a.regions[0].distribution)


def test_shifted_pair_rejects_bad_shift():
    base = synth.planted_spec(BOX, 4, seed=0)
    with pytest.raises(ValueError):
        synth.shifted_city_pair(base, shift=0.0)
