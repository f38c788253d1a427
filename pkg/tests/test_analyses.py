import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vowelbench import analyses, synth
from vowelbench.analyses import (
    PAIRS,
    TRIPLETS,
    FormantTable,
    acoustic_distances,
    bark,
    condensed,
    electrode_importance,
    rsa,
)
from vowelbench.classify import ClassifierSpec
from vowelbench.epochs import VOWELS, EpochSet
from vowelbench.features import FAMILIES, FeatureColumn, channel_groups, extract

LDA = ClassifierSpec("lda_shrinkage")


def _table(rng):
    f1 = {v: float(rng.uniform(250, 900)) for v in VOWELS}
    f2 = {v: float(rng.uniform(800, 2800)) for v in VOWELS}
    return FormantTable(f1, f2)


def test_task_lists():
    assert len(PAIRS) == 10
    assert PAIRS[:4] == ("ae", "ai", "ao", "au")
    assert TRIPLETS == ("aei", "aiu", "iou")


def test_bark_arithmetic():
    assert bark(1000.0) == pytest.approx(26.81 * 1000 / 2960 - 0.53)
    assert bark(1000.0) == pytest.approx(8.527, abs=1e-3)
    with pytest.raises(ValueError):
        bark([100.0, 0.0])


def test_acoustic_distance_identical_formants():
    t = FormantTable({v: 500.0 for v in VOWELS}, {v: 1500.0 for v in VOWELS})
    np.testing.assert_array_equal(acoustic_distances(t), np.zeros((5, 5)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_acoustic_distance_is_a_dissimilarity(seed):
    D = acoustic_distances(_table(np.random.default_rng(seed)))
    assert D.shape == (5, 5)
    np.testing.assert_array_equal(D, D.T)
    np.testing.assert_array_equal(np.diag(D), 0.0)
    assert np.all(D >= 0)
    # triangle inequality of a Euclidean embedding
    for i, j, k in [(0, 1, 2), (1, 3, 4), (0, 2, 4)]:
        assert D[i, k] <= D[i, j] + D[j, k] + 1e-12


def test_formant_table_validation():
    with pytest.raises(ValueError):
        FormantTable({v: 500.0 for v in "aeio"}, {v: 1500.0 for v in VOWELS})
    with pytest.raises(ValueError):
        FormantTable({v: -1.0 for v in VOWELS}, {v: 1500.0 for v in VOWELS})
    t = FormantTable.from_mapping({v: {"F1": 400 + i, "F2": 1500 + i} for i, v in enumerate(VOWELS)})
    assert t.f1["u"] == 404


def test_rsa_confusion_definition_and_monotone():
    rng = np.random.default_rng(0)
    D = acoustic_distances(_table(rng))
    d = condensed(D)
    acc = 0.5 + 0.1 * d / d.max()
    r = rsa(D, acc)
    assert r.statistic == pytest.approx(-1.0)
    # confusion = 1 - accuracy: 58.2 % -> 0.418
    assert 1.0 - 0.582 == pytest.approx(0.418)
    acc_map = dict(zip(PAIRS, acc))
    assert rsa(d, acc_map).statistic == pytest.approx(-1.0)


def test_rsa_errors():
    d = np.arange(10.0)
    with pytest.raises(ValueError):
        rsa(d, np.full(10, 0.6))
    with pytest.raises(ValueError):
        rsa(d[:9], np.linspace(0.5, 0.6, 9))


def _registry(channels):
    cols = []
    for ch in channels:
        cols += [FeatureColumn("bandpower", ch, str(b)) for b in range(5)]
        cols += [FeatureColumn("de", ch, str(b)) for b in range(5)]
        cols += [FeatureColumn("hjorth", ch, t) for t in ("act", "mob", "cpx")]
        cols += [FeatureColumn("temporal", ch, str(t)) for t in range(6)]
    return cols


def test_nineteen_columns_per_channel_from_extractor():
    spec = synth.SynthSpec(n_subjects=1, trials_per_class=1, n_channels=61)
    fm = extract(synth.generate(spec), FAMILIES)
    groups = channel_groups(fm.registry)
    assert len(groups) == 61
    assert {len(v) for v in groups.values()} == {analyses.FEATURES_PER_CHANNEL}


def test_uniform_importance_gives_equal_shares():
    reg = _registry(synth.CHANNELS_61)
    shares = electrode_importance([np.ones(len(reg))], reg)
    assert len(shares) == 61
    np.testing.assert_allclose(list(shares.values()), 1 / 61)
    assert 1 / 61 == pytest.approx(0.0164, abs=1e-4)
    assert 5 / 61 == pytest.approx(0.082, abs=1e-3)


def test_importance_on_one_channel_and_errors():
    reg = _registry(["Cz", "Pz", "Oz"])
    imp = np.zeros(len(reg))
    imp[19:38] = 1.0
    shares = electrode_importance([imp, imp], reg)
    assert shares["Pz"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        electrode_importance([np.ones(3)], reg)
    with pytest.raises(ValueError):
        electrode_importance([np.ones(2)], [FeatureColumn("pca", "*", "pc1"), FeatureColumn("pca", "*", "pc2")])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_importance_invariant_to_within_channel_column_order(seed):
    rng = np.random.default_rng(seed)
    reg = _registry(["C3", "Cz", "C4"])
    imp = rng.random((3, len(reg)))
    perm = np.concatenate([19 * c + rng.permutation(19) for c in range(3)])
    a = electrode_importance(imp, reg)
    b = electrode_importance(imp[:, perm], [reg[i] for i in perm])
    for ch in a:
        assert a[ch] == pytest.approx(b[ch], abs=1e-12)
    assert sum(a.values()) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def planted():
    spec = synth.SynthSpec(n_subjects=4, trials_per_class=10, n_channels=8, plant="channel", snr=1.0,
                           plant_channels=(3,))
    return synth.generate(spec)


def test_dropout_planted_channel(planted):
    shares, base = analyses.loso_importance(planted, ClassifierSpec("gbdt", {"n_estimators": 20}), families=("de",))
    order = analyses.ranking(shares)
    assert order[0] == "AF7"
    rows = analyses.channel_dropout(planted, order, [0, 1, 2], LDA)
    top = {r["k"]: r["mean"] for r in rows if r["direction"] == "top"}
    bottom = {r["k"]: r["mean"] for r in rows if r["direction"] == "bottom"}
    assert top[0] == bottom[0]
    for k in (1, 2):
        assert top[k] < bottom[k]
        assert top[k] < 0.3
    with pytest.raises(ValueError):
        analyses.channel_dropout(planted, order, [8], LDA)


def test_dropout_k0_reproduces_loso_exactly(planted):
    from vowelbench.harness import FeaturePipeline, loso
    ref = loso(planted, FeaturePipeline(LDA, ("de",))).accuracies("lda_shrinkage")
    rows = analyses.channel_dropout(planted, list(planted.channel_names), [0], LDA, directions=("top",))
    assert rows[0]["mean"] == float(ref.mean())


def test_pairwise_rows_and_corrections():
    spec = synth.SynthSpec(n_subjects=3, trials_per_class=8, n_channels=6, plant="band", snr=1.0,
                           plant_channels=(0, 1))
    rows = analyses.pairwise_tasks(synth.generate(spec), LDA)
    assert [r["pair"] for r in rows] == list(PAIRS + TRIPLETS)
    for r in rows:
        m = 10 if len(r["pair"]) == 2 else 3
        assert r["chance"] == pytest.approx(1 / len(r["pair"]))
        assert r["p_bonf"] == pytest.approx(min(1.0, m * r["p_raw"]))
    # gain grows with class index: a-vs-u is easier than a-vs-e
    acc = {r["pair"]: r["acc_mean"] for r in rows}
    assert acc["au"] >= acc["ae"]


def test_pairwise_needs_all_classes():
    spec = synth.SynthSpec(n_subjects=2, trials_per_class=4, n_channels=4, n_classes=4)
    with pytest.raises(ValueError):
        analyses.pairwise_tasks(synth.generate(spec), LDA)


def _erp_epochs(amplitudes, n_subjects=4, trials=6, noise=0.2, seed=0):
    rng = np.random.default_rng(seed)
    fs, tmin, n = 256.0, -0.2, 307
    t = tmin + np.arange(n) / fs
    data, labels, subjects = [], [], []
    for s in range(n_subjects):
        for v, amp in enumerate(amplitudes):
            for _ in range(trials):
                w = amp * np.exp(-0.5 * ((t - 0.1) / 0.01) ** 2) + 3.0 * np.exp(-0.5 * ((t - 0.2) / 0.015) ** 2)
                data.append(np.stack([w, w, np.zeros(n)]) + noise * rng.standard_normal((3, n)))
                labels.append(v)
                subjects.append(f"S{s + 1:02d}")
    return EpochSet(np.array(data), np.array(labels), np.array(subjects), fs, ("Cz", "FCz", "Oz"), tmin)


def test_erp_planted_negative_deflection():
    res = analyses.erp(_erp_epochs([-5.0, -4.0, -3.0, -2.0, -1.0]))
    n1 = [r for r in res["rows"] if r["component"] == "N1"]
    p2 = [r for r in res["rows"] if r["component"] == "P2"]
    assert [r["vowel"] for r in n1] == list(VOWELS)
    for r, amp in zip(n1, [-5.0, -4.0, -3.0, -2.0, -1.0]):
        assert abs(r["latency_ms"] - 100) <= 8
        assert r["peak_uv"] == pytest.approx(amp, abs=0.3)
    for r in p2:
        assert abs(r["latency_ms"] - 200) <= 8
    assert res["anova"]["N1"].p_raw < 1e-6
    assert res["anova"]["P2"].p_raw > 1e-3


def test_erp_identical_vowels_give_zero_f():
    ep = _erp_epochs([-2.0] * 5, noise=0.0)
    # break within-group constancy with a subject-level offset identical for every vowel
    data = ep.data.copy()
    for s, sid in enumerate(ep.subject_ids()):
        data[ep.subjects == sid] *= 1.0 + 0.1 * s
    res = analyses.erp(ep.with_data(data))
    assert res["anova"]["N1"].statistic == pytest.approx(0.0, abs=1e-9)


def test_erp_null_p_values_spread():
    ps = [analyses.erp(_erp_epochs([0.0] * 5, trials=3, noise=2.0, seed=s))["anova"]["N1"].p_raw
          for s in range(30)]
    from scipy.stats import kstest
    assert kstest(ps, "uniform").pvalue > 0.001


def test_erp_errors():
    ep = _erp_epochs([-1.0] * 5, n_subjects=1, trials=2)
    with pytest.raises(ValueError):
        analyses.erp(ep, channels=("Pz",))
    with pytest.raises(ValueError):
        analyses.erp(ep, n1=(0.9, 1.3))


def test_writers(tmp_path):
    reg = _registry(["Cz", "Pz"])
    shares = electrode_importance([np.arange(len(reg), dtype=float)], reg)
    analyses.write_importance(shares, tmp_path / "importance.csv", "# h")
    lines = (tmp_path / "importance.csv").read_text().splitlines()
    assert lines[:2] == ["# h", "channel,share"]
    assert lines[2].startswith("Pz,")
    res = analyses.erp(_erp_epochs([-2.0, -1.0, -2.0, -1.0, -2.0]))
    analyses.write_erp(res, tmp_path / "erp.csv")
    assert (tmp_path / "erp.csv").read_text().splitlines()[0] == "vowel,component,peak_uv,latency_ms"
