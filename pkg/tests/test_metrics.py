import numpy as np
import pytest
from scipy import linalg

from progsynth.metrics import (
    GaussianStats,
    MetricError,
    MetricReport,
    compare_reports,
    discontinuity_index,
    evaluate_volumes,
    extract_features,
    feature_extractor,
    frechet_distance,
    gaussian_stats,
    psnr,
)
from progsynth.phantom import generate_phantom
from progsynth.volume import Orientation, Volume, extract_slices


def stats(mean, cov):
    return GaussianStats(np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(np.asarray(cov, float)), 10)


def frechet_oracle(a, b):
    # textbook form with a general (non-symmetric) matrix square root
    covmean = linalg.sqrtm(a.cov @ b.cov).real
    d = a.mean - b.mean
    return float(d @ d + np.trace(a.cov + b.cov - 2 * covmean))


# -- psnr ---------------------------------------------------------------------


def test_psnr_mse_001_is_20db():
    # one voxel off by 0.5 among 25 -> MSE 0.25 / 25 = 0.01
    ref = Volume(np.zeros((1, 5, 5)))
    syn = np.zeros((1, 5, 5))
    syn[0, 2, 2] = 0.5
    assert psnr(ref, Volume(syn)) == pytest.approx(20.0, abs=1e-9)


def test_psnr_identical_capped():
    v = generate_phantom(1, 16).t1
    assert psnr(v, v) == 99.0


def test_psnr_max_val():
    ref = Volume(np.zeros((1, 5, 5)))
    syn = np.zeros((1, 5, 5))
    syn[0, 0, 0] = 5.0
    assert psnr(ref, Volume(syn), max_val=10.0) == pytest.approx(20.0, abs=1e-9)


def test_psnr_dim_mismatch():
    with pytest.raises(MetricError):
        psnr(Volume(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 3))))


def test_psnr_decreases_with_noise():
    ref = generate_phantom(2, 16, noise_std=0).t1
    rng = np.random.default_rng(0)
    scores = [psnr(ref, Volume(np.clip(ref.data + rng.normal(0, s, ref.dims), 0, 1))) for s in (0.01, 0.05, 0.2)]
    assert scores[0] > scores[1] > scores[2]


# -- frechet ------------------------------------------------------------------


def test_frechet_equal_stats():
    s = gaussian_stats(np.random.default_rng(0).standard_normal((50, 6)))
    assert frechet_distance(s, s) <= 1e-6


def test_frechet_unit_mean_shift():
    a = stats(np.zeros(4), np.eye(4))
    b = stats(np.eye(4)[0], np.eye(4))
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-8)


def test_frechet_1d_variances():
    # (sqrt 4 - sqrt 1)^2 = 1
    assert frechet_distance(stats([0.0], [[4.0]]), stats([0.0], [[1.0]])) == pytest.approx(1.0, abs=1e-8)


def test_frechet_matches_sqrtm_oracle_and_is_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = int(rng.integers(1, 8))
        a = gaussian_stats(rng.standard_normal((30, d)) * rng.uniform(0.2, 3))
        b = gaussian_stats(rng.standard_normal((30, d)) @ rng.standard_normal((d, d)) + rng.standard_normal(d))
        ab = frechet_distance(a, b)
        assert ab == pytest.approx(frechet_oracle(a, b), rel=1e-6, abs=1e-8)
        assert ab == pytest.approx(frechet_distance(b, a), rel=1e-8, abs=1e-10)
        assert frechet_distance(a, a) <= 1e-6


def test_gaussian_stats_needs_two_samples():
    with pytest.raises(MetricError):
        gaussian_stats(np.zeros((1, 4)))


def test_gaussian_stats_unbiased_with_regularizer():
    x = np.array([[0.0], [2.0]])
    s = gaussian_stats(x)
    assert s.cov[0, 0] == pytest.approx(2.0 + 1e-6, abs=1e-15)


# -- features -----------------------------------------------------------------


def test_feature_extractor_fixed():
    v = generate_phantom(4, 16).t1
    a = extract_features(extract_slices(v, Orientation.AXIAL))
    b = extract_features(extract_slices(v, Orientation.AXIAL), feature_extractor())
    assert a.shape == (16, 64)
    assert a.tobytes() == b.tobytes()


def test_feature_extractor_rejects_small_slices():
    with pytest.raises(MetricError):
        extract_features(extract_slices(Volume(np.zeros((3, 4, 4))), Orientation.AXIAL))


# -- discontinuity ------------------------------------------------------------


@pytest.mark.parametrize("o", list(Orientation))
def test_di_constant_volume_zero(o):
    assert discontinuity_index(Volume(np.full((4, 5, 6), 0.3)), o) == 0.0


@pytest.mark.parametrize("o", list(Orientation))
def test_di_alternating_slices_one(o):
    shape = [4, 4, 4]
    idx = np.indices(shape)[o.axis]
    assert discontinuity_index(Volume((idx % 2).astype(np.float32)), o) == 1.0


def test_di_single_slice_rejected():
    with pytest.raises(MetricError):
        discontinuity_index(Volume(np.zeros((1, 4, 4))), Orientation.AXIAL)


# -- evaluation ---------------------------------------------------------------


def phantoms(seeds, noise=0.02):
    return [generate_phantom(s, 16, noise_std=noise).t1 for s in seeds]


def test_evaluate_identical():
    vols = phantoms(range(3))
    r = evaluate_volumes(vols, vols, method="m", dataset_id="d", seed=1)
    assert r.psnr_mean == 99.0 and r.psnr_std == 0.0
    assert r.fid <= 1e-6
    assert all(v == 0.0 for v in r.di_delta.values())
    assert (r.method, r.dataset_id, r.seed) == ("m", "d", 1)


def test_evaluate_count_mismatch():
    vols = phantoms(range(2))
    with pytest.raises(MetricError, match="count mismatch"):
        evaluate_volumes(vols, vols[:1])


def test_evaluate_std_is_population():
    refs = [Volume(np.zeros((8, 8, 8)))] * 2
    syns = [Volume(np.full((8, 8, 8), 0.1)), Volume(np.full((8, 8, 8), 0.01))]
    r = evaluate_volumes(refs, syns)
    scores = [psnr(x, y) for x, y in zip(refs, syns)]
    assert r.psnr_per_subject == scores
    assert r.psnr_std == pytest.approx(abs(scores[0] - scores[1]) / 2, abs=1e-9)


def test_fid_same_distribution_below_noisy():
    refs = phantoms(range(10, 14))
    same = phantoms(range(20, 24))
    rng = np.random.default_rng(0)
    noisy = [Volume(np.clip(v.data + rng.normal(0, 0.2, v.dims), 0, 1)) for v in refs]
    fe = feature_extractor()
    assert evaluate_volumes(refs, same, fe).fid < evaluate_volumes(refs, noisy, fe).fid


def report(method, p, fid):
    return MetricReport(p, 0.0, [p], fid, {"axial": 0, "coronal": 0, "sagittal": 0}, method=method)


def test_compare_phrasing():
    s = compare_reports(report("progressive", 25.0, 6.0), report("2d-gan", 24.5, 10.0))
    assert s == "progressive achieves 0.50 dB higher PSNR and 40.00% lower FID compared to 2d-gan"
    s = compare_reports(report("a", 20.0, 12.0), report("b", 21.0, 10.0))
    assert s == "a achieves 1.00 dB lower PSNR and 20.00% higher FID compared to b"


def test_report_round_trip():
    r = report("x", 30.0, 1.5)
    assert MetricReport.from_dict(r.to_dict()) == r
