"""Acceptance gate.

Each test carries a ``criterion`` marker; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run.
"""

import math
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from scipy.special import logsumexp

import oracles
from noisy_ner import cli, noise, synthetic, trainer
from noisy_ner import confidence as conf
from noisy_ner import lattice as lt
from noisy_ner.corpus import TagSet, corpus_spans, read_conll, write_conll

criterion = pytest.mark.criterion


def _log_close(got, want, tol=1e-8):
    if want == -np.inf:
        return got == -np.inf
    return abs(got - want) <= tol * max(1.0, abs(want))


# --------------------------------------------------------------- 1


@criterion(1, "lattice oracle suite")
def test_lattice_oracle_suite(backend):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    checked = 0
    for _ in range(200):
        n, L = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        em, tr = oracles.random_lattice(rng, n, L)
        lat = lt.Lattice(em, tr)
        ps, sc = oracles.all_scores(em, tr)
        z = oracles.log_z(em, tr)

        assert _log_close(lt.log_partition(lat), z)

        for _ in range(3):
            y = ps[int(rng.integers(len(ps)))]
            assert _log_close(lt.sequence_log_prob(lat, y), oracles.score(em, tr, y) - z)

        got_m = lt.forward_backward(lat)
        log_m = got_m.log_alpha + got_m.log_beta - got_m.log_z
        want_m = oracles.log_marginals(em, tr)
        assert all(_log_close(g, w) for g, w in zip(log_m.ravel(), want_m.ravel()))

        mask = oracles.random_mask(rng, n, L)
        want_c = oracles.log_z(em, tr, oracles.mask_sets(mask)) - z
        assert _log_close(lt.constrained_log_marginal(lat, mask), want_c)

        path, best = lt.viterbi(lat)
        want_path, want_best = oracles.best_path(em, tr)
        np.testing.assert_array_equal(path, want_path)
        assert _log_close(best, want_best)
        checked += 1
    elapsed = time.perf_counter() - start
    assert checked >= 200
    assert elapsed < 10, f"took {elapsed:.1f}s"


# --------------------------------------------------------------- 2


@criterion(2, "gradient suite")
def test_gradient_suite(backend):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    for _ in range(50):
        n, L = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        em, tr = oracles.random_lattice(rng, n, L, scale=1.0)
        mask = oracles.random_mask(rng, n, L)
        _, g_em, g_tr = lt.partial_marginal_objective(lt.Lattice(em, tr), mask)

        def nll_em(e):
            return -(lt.log_partition(lt.Lattice(e, tr), mask) - lt.log_partition(lt.Lattice(e, tr)))

        def nll_tr(t):
            return -(lt.log_partition(lt.Lattice(em, t), mask) - lt.log_partition(lt.Lattice(em, t)))

        np.testing.assert_allclose(-g_em, oracles.central_difference(nll_em, em, 1e-5), rtol=0, atol=1e-4)
        np.testing.assert_allclose(-g_tr, oracles.central_difference(nll_tr, tr, 1e-5), rtol=0, atol=1e-4)
    elapsed = time.perf_counter() - start
    assert elapsed < 30, f"took {elapsed:.1f}s"


# --------------------------------------------------------------- 3


@criterion(3, "schedule exactness")
def test_schedule_exactness():
    for tau in (0.005, 0.15):
        for K in (1, 2, 3, 5, 7, 10):
            cfg = conf.ScheduleConfig(tau_p=tau, tau_n=tau, warmup_epochs=K)
            for e in sorted({0, 1, K // 2, K - 1, K, K + 1, 2 * K, 50}):
                want = 1 - min(e / K * tau, tau)
                for group in ("p", "n"):
                    got = conf.keep_ratio(e, cfg, group)
                    assert got == want, (e, K, tau, got, want)
                    exact = 1 - min(Fraction(e, K) * Fraction(tau), Fraction(tau))
                    assert abs(Fraction(got) - exact) < Fraction(1, 2**50)
            assert conf.keep_ratio(0, cfg, "p") == 1.0
            assert conf.keep_ratio(K, cfg, "n") == 1 - tau
            assert conf.keep_ratio(K + 3, cfg, "p") == 1 - tau


# --------------------------------------------------------------- 4

TRUST_TS = TagSet(("PER", "LOC"))
TRUST_WORDS = ["Alice", "moved", "from", "New", "York", "to", "Brooklyn"]
TRUST_OBSERVED = ["B-PER", "O", "O", "O", "B-LOC", "O", "B-PER"]


def _partial_trust_records():
    ts = TRUST_TS
    observed = [ts.parse(t) for t in TRUST_OBSERVED]
    # model beliefs: New is really B-LOC, York really I-LOC, Brooklyn really B-LOC
    beliefs = {
        0: "B-PER", 1: "O", 2: "O", 3: "B-LOC", 4: "I-LOC", 5: "O", 6: "B-LOC",
    }
    dist = np.full((len(TRUST_WORDS), len(ts)), 0.02)
    for i, tag in beliefs.items():
        dist[i, ts.parse(tag)] = 0.92
    scores = dist[np.arange(len(observed)), observed]
    # 4 negatives, 3 positives: keep floor(0.8*4)=3 and floor(0.5*3)=1
    cfg = conf.ScheduleConfig(tau_p=0.5, tau_n=0.2, warmup_epochs=5)
    records = conf.split_trusted(conf.make_records(0, observed, scores), 5, cfg)
    return [
        replace(r, calibration=conf.calibrate(r.observed_label, dist[r.token_index], ts))
        if r.group == "p" and not r.trusted
        else r
        for r in records
    ]


@criterion(4, "partial-trust fixture")
def test_partial_trust_fixture(backend):
    ts = TRUST_TS
    records = _partial_trust_records()
    untrusted = [TRUST_WORDS[r.token_index] for r in records if not r.trusted]
    assert untrusted == ["New", "York", "Brooklyn"]
    mask = conf.build_mask(len(TRUST_WORDS), records, ts)

    def names(labels):
        return {ts.parse(t) for t in labels}

    allowed = [
        names(["B-PER"]),
        names(["O"]),
        names(["O"]),
        set(range(len(ts))),
        names(["B-LOC", "I-LOC", "O"]),
        names(["O"]),
        names(["B-PER", "B-LOC", "O"]),
    ]
    assert oracles.mask_sets(mask) == allowed

    rng = np.random.default_rng(4)
    for _ in range(5):
        em, tr = oracles.random_lattice(rng, len(TRUST_WORDS), len(ts))
        lat = lt.Lattice(em, tr)
        ps, sc = oracles.all_scores(em, tr)
        compatible = [all(y in allowed[i] for i, y in enumerate(p)) for p in ps]
        assert sum(compatible) == 5 * 3 * 3
        want = logsumexp(sc[np.asarray(compatible)]) - logsumexp(sc)
        assert _log_close(lt.constrained_log_marginal(lat, mask), want)


# --------------------------------------------------------------- 5


@pytest.fixture(scope="module")
def thousand(tmp_path_factory):
    root = tmp_path_factory.mktemp("perturb")
    write_conll(synthetic.generate(1000, seed=99), root / "clean.conll")
    return root


@criterion(5, "perturbation contract")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_perturbation_contract(thousand, seed):
    outs = []
    for run in ("a", "b"):
        cfg = cli.resolve_config(
            {
                "seed": seed,
                "data.corpus": str(thousand / "clean.conll"),
                "output.dir": str(thousand / f"{seed}{run}"),
                "perturb.target_recall": 0.5,
                "perturb.target_precision": 0.9,
            }
        )
        start = time.perf_counter()
        res = cli.cmd_perturb(cfg)
        elapsed = time.perf_counter() - start
        assert elapsed < 5, f"took {elapsed:.1f}s"
        outs.append(res)

    a, b = (thousand / f"{seed}{r}" for r in "ab")
    assert (a / "perturbed.conll").read_bytes() == (b / "perturbed.conll").read_bytes()
    assert (a / "perturbed.ledger.json").read_bytes() == (b / "perturbed.ledger.json").read_bytes()

    noisy = read_conll(a / "perturbed.conll", tag_column=1, gold_column=2)
    ledger = noise.NoiseLedger.load(a / "perturbed.ledger.json")
    gold = corpus_spans(noisy.gold_tags(), noisy.tagset)
    obs = corpus_spans(noisy.observed_tags(), noisy.tagset)
    matched = len(gold & obs)
    recall, precision = matched / len(gold), matched / len(obs)
    assert recall == outs[0]["recall"] and precision == outs[0]["precision"]
    assert recall <= 0.5 and precision <= 0.9

    # undoing the last identity removal would put recall back above target
    last = ledger.removed_entities[-1]
    def words(sp):
        return " ".join(noisy.sentences[sp.sentence_id].words[sp.start : sp.end])

    last_identity = [sp for sp in ledger.removed_entities if (words(sp), sp.type) == (words(last), last.type)]
    assert (matched + len(last_identity)) / len(gold) > 0.5
    # and undoing the last spurious insertion would put precision above target
    assert matched / (len(obs) - 1) > 0.9


# --------------------------------------------------------------- 6


@criterion(6, "reduction tests")
def test_zero_tau_is_plain_mle():
    clean = synthetic.generate(150, seed=6)
    corpus, _ = noise.perturb(clean, noise.PerturbationConfig(seed=6))
    cfg = trainer.TrainConfig(epochs=4, seed=6)
    for epochs in range(1, cfg.epochs + 1):
        c = replace(cfg, epochs=epochs)
        ours = trainer.fit(corpus, c)
        plain = trainer.fit_supervised(corpus, c)
        assert np.array_equal(ours.model.emission.weights, plain.model.emission.weights)
        assert np.array_equal(ours.model.transitions, plain.model.transitions)
        assert [r["loss"] for r in ours.metrics] == [r["loss"] for r in plain.metrics]


@criterion(6, "reduction tests")
def test_zero_transitions_make_local_equal_global():
    rng = np.random.default_rng(66)
    for _ in range(100):
        n, L = int(rng.integers(1, 9)), int(rng.integers(1, 8))
        em, _ = oracles.random_lattice(rng, n, L, scale=3.0)
        lat = lt.Lattice(em, lt.zero_transitions(L))
        tags = rng.integers(L, size=n)
        g = conf.score_tokens(lat, tags, "global")
        l = conf.score_tokens(lat, tags, "local")
        assert np.max(np.abs(g - l)) <= 1e-12
        np.testing.assert_allclose(
            conf.label_distribution(lat, "global"), conf.label_distribution(lat, "local"), rtol=0, atol=1e-12
        )
    clean = synthetic.generate(60, seed=7)
    model = trainer.fit_supervised(clean, trainer.TrainConfig(epochs=2)).model
    model.transitions[:] = 0.0
    for lat, sent in zip(model.lattices(model.features(clean)), clean):
        g = conf.score_tokens(lat, sent.tags, "global")
        l = conf.score_tokens(lat, sent.tags, "local")
        assert np.max(np.abs(g - l)) <= 1e-12


# --------------------------------------------------------------- 7

DESK_SEEDS = (0, 1, 2)


def _desk_data(seed):
    train = synthetic.generate(500, seed=100 + seed)
    dev = synthetic.generate(200, seed=200 + seed)
    test = synthetic.generate(200, seed=300 + seed)
    noisy, ledger = noise.perturb(train, noise.PerturbationConfig(0.5, 0.9, seed=seed))
    return noisy, ledger, dev, test


def _random_flagger_f1(budget, num_noisy, num_tokens):
    # a uniform random flagger's matched count has mean budget*num_noisy/num_tokens,
    # and F1 = 2*matched/(budget + num_noisy) is linear in it
    return 2 * budget * num_noisy / (num_tokens * (budget + num_noisy))


@pytest.fixture(scope="module")
def desk():
    start = time.perf_counter()
    runs = {}
    for seed in DESK_SEEDS:
        noisy, ledger, dev, test = _desk_data(seed)
        cfg = trainer.TrainConfig(seed=seed)
        prepared = trainer.Prepared.of(noisy)
        plain = trainer.fit_supervised(noisy, cfg, prepared=prepared)
        oracle = trainer.fit(noisy, cfg.with_tau(*noise.oracle_tau(noisy, ledger)), ledger=ledger, prepared=prepared)
        search = trainer.grid_search_tau(noisy, dev, cfg)
        searched = trainer.fit(noisy, cfg.with_tau(*search.best), prepared=prepared, keep_records=False)
        runs[seed] = {
            "noisy": noisy,
            "ledger": ledger,
            "oracle": oracle,
            "tau": search.best,
            "plain_f1": plain.model.evaluate(test)["f1"],
            "searched_f1": searched.model.evaluate(test)["f1"],
        }
    return runs, time.perf_counter() - start


@criterion(7, "desk-scale end-to-end")
def test_noise_detection_beats_random(desk):
    runs, _ = desk
    for seed, run in runs.items():
        flagged = trainer.untrusted_tokens(run["oracle"].records)
        f1 = noise.score_noise_detection(flagged, run["ledger"])["f1"]
        assert f1 == run["oracle"].metrics[-1]["noise_detection_f1"]
        baseline = _random_flagger_f1(len(flagged), len(run["ledger"].noisy_tokens), run["noisy"].num_tokens)
        print(f"seed {seed}: noise-detection F1 {f1:.3f} vs random {baseline:.3f}")
        assert f1 - baseline >= 0.2


@criterion(7, "desk-scale end-to-end")
def test_searched_tau_beats_plain(desk):
    runs, _ = desk
    wins = 0
    for seed, run in runs.items():
        print(f"seed {seed}: tau*={run['tau']} searched F1 {run['searched_f1']:.3f} vs plain {run['plain_f1']:.3f}")
        wins += run["searched_f1"] >= run["plain_f1"]
    assert wins == len(DESK_SEEDS)


@criterion(7, "desk-scale end-to-end")
def test_desk_runtime(desk):
    _, elapsed = desk
    assert elapsed < 300, f"took {elapsed:.0f}s"


# --------------------------------------------------------------- 8


@criterion(8, "self-training sanity")
def test_self_training_sanity():
    seed = DESK_SEEDS[0]
    noisy, ledger, dev, test = _desk_data(seed)
    cfg = trainer.TrainConfig(seed=seed)
    aware = trainer.SelfTrainConfig(rounds=3, first_round_tau="oracle", split_seed=seed)
    first = trainer.self_train(noisy, aware, cfg, dev, test, ledger)
    again = trainer.self_train(noisy, aware, cfg, dev, test, ledger)
    assert len(first.rounds) == 3
    assert first.rounds == again.rounds
    assert first.checkpoint.to_json() == again.checkpoint.to_json()
    assert first.corpus == again.corpus
    assert [(r["tau_p"], r["tau_n"]) for r in first.rounds[1:]] == [(0.005, 0.15)] * 2

    baseline_cfg = trainer.SelfTrainConfig(rounds=3, later_tau_p=0.0, later_tau_n=0.0, split_seed=seed)
    baseline = trainer.self_train(noisy, baseline_cfg, cfg, dev, test, ledger)
    for a, b in zip(first.rounds, baseline.rounds):
        print(f"round {a['round']}: confidence {a['test_f1']:.3f} vs baseline {b['test_f1']:.3f}")
    assert first.rounds[0]["test_f1"] >= baseline.rounds[0]["test_f1"]


# --------------------------------------------------------------- 9


@criterion(9, "tau search")
def test_tau_search(monkeypatch):
    assert list(trainer.TAU_GRID) == [round(0.01 * i, 2) for i in range(21)]
    assert trainer.TAU_GRID[0] == 0.0 and trainer.TAU_GRID[-1] == 0.2
    clean = synthetic.generate(200, seed=9)
    noisy, _ = noise.perturb(clean, noise.PerturbationConfig(seed=9))
    dev = synthetic.generate(100, seed=19)
    cfg = trainer.TrainConfig(seed=9, epochs=6)

    calls = []
    real_fit = trainer.fit

    def counting_fit(*args, **kwargs):
        calls.append(args[1].schedule)
        return real_fit(*args, **kwargs)

    monkeypatch.setattr(trainer, "fit", counting_fit)
    a = trainer.grid_search_tau(noisy, dev, cfg)
    assert len(calls) == 42 and a.num_fits == 42
    assert [s.tau_n for s in calls[:21]] == list(trainer.TAU_GRID)
    assert all(s.tau_p == 0.0 for s in calls[:21])
    assert [s.tau_p for s in calls[21:]] == list(trainer.TAU_GRID)
    assert all(s.tau_n == a.tau_n for s in calls[21:])
    b = trainer.grid_search_tau(noisy, dev, cfg)
    assert a.best == b.best and a.trace == b.trace
    assert math.isclose(max(r["dev_f1"] for r in a.trace[21:]), next(
        r["dev_f1"] for r in a.trace[21:] if r["tau_p"] == a.tau_p
    ))
