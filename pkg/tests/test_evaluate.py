import numpy as np
import pytest

from adaptrec.evaluate import (
    EvalProtocol,
    MfConfig,
    ProtocolError,
    RandomScorer,
    build_candidates,
    evaluate_hr,
    hits_from_scores,
    mf_baseline,
    run_seeds,
    summarize,
)
from adaptrec.graph import split_dataset
from adaptrec.synth import SynthConfig, gen_synthetic


@pytest.fixture(scope="module")
def big_split():
    g = gen_synthetic(SynthConfig(400, 120, 0.1, 0.3, seed=3))
    return split_dataset(g, 0.05, 0.25, seed=1)


def oracle_scorer(split):
    truth = {tuple(e) for e in split.test.tolist()}

    def score(users, items):
        return np.array([1.0 if (u, i) in truth else 0.0 for u, i in zip(users, items)])

    return score


def test_perfect_scorer(big_split):
    assert evaluate_hr(oracle_scorer(big_split), big_split).hr == 1.0


def test_constant_scorer_loses_all_ties(big_split):
    res = evaluate_hr(lambda u, i: np.zeros(len(u)), big_split)
    assert res.hr == 0.0 and res.evaluated > 0


def test_random_scorer_near_five_in_fifty(big_split):
    res = evaluate_hr(RandomScorer(0), big_split)
    assert res.evaluated >= 1000
    assert abs(res.hr - 0.10) <= 0.03


def test_candidates_exclude_all_known_positives(big_split):
    c = build_candidates(big_split, EvalProtocol(), seed=0)
    pos = {tuple(e) for p in ("train", "val", "test") for e in getattr(big_split, p).tolist()}
    for u, row in zip(c.users, c.items):
        assert len(set(row[1:].tolist())) == 49
        assert all((int(u), int(j)) not in pos for j in row[1:])
        assert (int(u), int(row[0])) in pos


def test_evaluation_is_pure(big_split):
    def scorer(u, i):
        return np.sin(u * 1.3 + i * 0.7)

    a = evaluate_hr(scorer, big_split, seed=4)
    b = evaluate_hr(scorer, big_split, seed=4)
    assert a == b


def test_hits_monotone_in_true_score():
    rng = np.random.default_rng(0)
    scores = rng.random((200, 50))
    base = hits_from_scores(scores, 5)
    bumped = scores.copy()
    bumped[:, 0] += rng.random(200) * 0.2
    assert np.all(hits_from_scores(bumped, 5) >= base)


def test_short_pool_skip_vs_replace():
    g = gen_synthetic(SynthConfig(30, 30, 0.2, 0.0, seed=2))
    s = split_dataset(g, 0.05, 0.1, 0)
    with pytest.raises(ProtocolError):
        evaluate_hr(RandomScorer(0), s)  # fewer than 49 items exist at all
    res = evaluate_hr(RandomScorer(0), s, EvalProtocol(short_pool="replace"))
    assert res.evaluated == len(s.test) and res.skipped == 0


def test_protocol_validation():
    with pytest.raises(ValueError):
        EvalProtocol(k=50, negatives_per_positive=49)


def test_run_seeds_deterministic_scorer(big_split):
    def experiment(seed):
        return evaluate_hr(lambda u, i: -i.astype(float), big_split, seed=0).hr

    summary = run_seeds(experiment, [0, 1, 2, 3, 4])
    assert len(summary.values) == 5 and summary.std == 0.0


def test_summary_format():
    s = summarize([0.5, 0.7])
    assert s.mean == pytest.approx(0.6)
    assert s.std == pytest.approx(np.std([0.5, 0.7], ddof=1))
    assert s.formatted() == "60.00±14.14"


def _two_blocks():
    return gen_synthetic(SynthConfig(120, 120, 0.1, 0.0, seed=6, communities=2, mixing=0.0))


def test_mf_beats_random_on_blocks():
    s = split_dataset(_two_blocks(), 0.05, 0.05, 0)
    _, res = mf_baseline(s, MfConfig(epochs=30, seed=0))
    assert res.hr > 0.10


def test_mf_zero_init_ties():
    s = split_dataset(_two_blocks(), 0.05, 0.05, 0)
    _, res = mf_baseline(s, MfConfig(epochs=2, init_std=0.0))
    assert res.hr == 0.0


def test_mf_deterministic():
    s = split_dataset(_two_blocks(), 0.05, 0.05, 0)
    a = mf_baseline(s, MfConfig(epochs=3, seed=5))[1]
    b = mf_baseline(s, MfConfig(epochs=3, seed=5))[1]
    assert a == b
