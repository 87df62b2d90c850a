import numpy as np
import pytest

from qrheston.dataset import (
    N_IVS,
    N_SPX,
    OMEGA_HI,
    OMEGA_LO,
    SampleRecord,
    arrays,
    export_csv,
    fit_normalization,
    generate_corpus,
    load_corpus,
    make_sample,
    sample_seed,
    split_counts,
)
from qrheston.errors import DomainError
from qrheston.simulation import SimConfig

SMALL = SimConfig(0.09, 75, 2000)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory, kernel10):
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(None, SMALL, out, kernel=kernel10, master_seed=7, splits=(3, 1, 1))
    return out


def test_split_counts_largest_remainder():
    assert split_counts(180_000) == (150_000, 20_000, 10_000)
    assert split_counts(2500) == (2083, 278, 139)
    assert sum(split_counts(7)) == 7
    with pytest.raises(DomainError):
        split_counts(0)


def test_sample_seeds_are_distinct_and_stable():
    seeds = {sample_seed(0, i, a) for i in range(50) for a in range(3)}
    assert len(seeds) == 150
    assert sample_seed(3, 4, 1) == sample_seed(3, 4, 1) != sample_seed(4, 4, 1)


def test_record_row_round_trip():
    rng = np.random.default_rng(0)
    mask = rng.random(N_IVS) > 0.1
    rec = SampleRecord(rng.random(5), rng.random(10), rng.random(60), rng.random(60), 99, mask,
                       ci_spx=rng.random(60), index=4, split=2, attempt=1)
    back = SampleRecord.from_row(rec.to_row())
    assert np.array_equal(back.mask, mask) and back.seed == 99 and back.split == 2 and back.attempt == 1
    assert np.array_equal(back.ivs[mask], rec.ivs[mask]) and np.all(np.isnan(back.ivs[~mask]))
    assert np.array_equal(back.ci_spx, rec.ci_spx) and np.all(np.isnan(back.ci_vix))
    with pytest.raises(DomainError):
        SampleRecord(np.zeros(4), np.zeros(10), np.zeros(60), np.zeros(60), 0, mask)


def test_make_sample_draws_inside_the_box(kernel10):
    rec = make_sample(sample_seed(1, 0), SMALL, kernel10)
    assert np.all(rec.omega >= OMEGA_LO) and np.all(rec.omega <= OMEGA_HI)
    assert np.all(np.abs(rec.z0) <= 0.5)
    assert np.all(np.isfinite(rec.ci[rec.mask]))
    assert np.all((rec.ivs[rec.mask] > 0) & (rec.ivs[rec.mask] < 5))


def test_corpus_is_deterministic_and_ordered(tiny_corpus, tmp_path, kernel10):
    c = load_corpus(tiny_corpus)
    assert len(c) == 5 and list(c.records["index"]) == list(range(5))
    assert list(c.records["split"]) == [0, 0, 0, 1, 2]
    assert len(c.split("validation")) == 1
    assert all(r.valid_fraction >= 0.9 for r in c.samples())
    generate_corpus(None, SMALL, tmp_path, kernel=kernel10, master_seed=7, splits=(3, 1, 1))
    assert (tmp_path / "corpus.qrc").read_bytes() == (tiny_corpus / "corpus.qrc").read_bytes()


def test_parallel_generation_matches_serial(tiny_corpus, tmp_path, kernel10):
    generate_corpus(None, SMALL, tmp_path, kernel=kernel10, master_seed=7, splits=(3, 1, 1), workers=2)
    assert (tmp_path / "corpus.qrc").read_bytes() == (tiny_corpus / "corpus.qrc").read_bytes()


def test_export_csv(tiny_corpus, tmp_path):
    export_csv(tiny_corpus, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 6 and len(lines[0].split(",")) == 3 + 15 + 120


def test_normalization(tiny_corpus):
    c = load_corpus(tiny_corpus)
    stats = fit_normalization(c.split("train"))
    theta, ivs, mask, _ = arrays(c.split("train"))
    u = stats.normalize_params(theta)
    assert np.all(np.abs(u) <= 1) and np.allclose(stats.denormalize_params(u), theta)
    y = stats.normalize_ivs(ivs)
    assert np.allclose(np.nanmean(np.where(mask, y, np.nan), axis=0)[mask.all(axis=0)], 0.0, atol=1e-12)
    assert np.allclose(stats.denormalize_ivs(y[:, :N_SPX], slice(0, N_SPX)), ivs[:, :N_SPX], equal_nan=True)
    assert stats.from_dict(stats.to_dict()).digest() == stats.digest()
    with pytest.raises(DomainError):
        fit_normalization(c.split("train")[:1])
