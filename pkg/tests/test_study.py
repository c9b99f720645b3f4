import json

import pytest

from ulcerforge.errors import ConfigError, DataError
from ulcerforge.study import (DuplicateVerdictError, StudyConfig, StudyImage, Verdict,
                              VerdictStore, build_paper_fixture, score_ratings,
                              study_report, write_fixture)


def _images(n_real=2, n_synth=2):
    imgs = []
    for i in range(n_real):
        imgs.append(StudyImage(token=f"r{i}", path=f"r{i}.png", label="real"))
    for i in range(n_synth):
        imgs.append(StudyImage(token=f"s{i}", path=f"s{i}.png", label="synthetic"))
    return imgs


def _verdict(rater, token, verdict, ts=0.0):
    return Verdict(session_id=f"sess-{rater}", rater_id=rater, token=token,
                   verdict=verdict, ts=ts)


def _full_verdicts(config: StudyConfig, correct: bool = True):
    out = []
    for img in config.images:
        right = "real" if img.label == "real" else "fake"
        wrong = "fake" if right == "real" else "real"
        for r in range(config.raters_expected):
            out.append(_verdict(f"rater-{r}", img.token, right if correct else wrong))
    return out


class TestStudyConfig:
    def test_split_counts(self):
        cfg = StudyConfig(images=_images(3, 1))
        assert cfg.images_total == 4
        assert cfg.split == {"real": 3, "synthetic": 1}

    def test_duplicate_tokens_rejected(self):
        imgs = _images() + [StudyImage(token="r0", path="dup.png", label="real")]
        with pytest.raises(ConfigError):
            StudyConfig(images=imgs)

    def test_json_round_trip(self):
        cfg = StudyConfig(images=_images(), raters_expected=3, shuffle_seed=5,
                          admin_token="tok")
        back = StudyConfig.from_json(cfg.to_json())
        assert back == cfg


class TestScoreRatings:
    def test_unanimous_correct_real(self):
        truth = {"r0": "real"}
        verdicts = [_verdict(f"rater-{i}", "r0", "real") for i in range(3)]
        scores = score_ratings(verdicts, truth)
        assert scores.per_image_correct["r0"] == 3
        assert scores.real_accuracy == 1.0

    def test_two_of_three_on_synthetic(self):
        # 2 correct (fake) + 1 real vote: count 2, fooling numerator 1/3
        truth = {"s0": "synthetic"}
        verdicts = [_verdict("a", "s0", "fake"), _verdict("b", "s0", "fake"),
                    _verdict("c", "s0", "real")]
        scores = score_ratings(verdicts, truth)
        assert scores.per_image_correct["s0"] == 2
        assert scores.fooling_rate == pytest.approx(1 / 3)

    def test_unknown_image_rejected(self):
        with pytest.raises(DataError, match="unknown image"):
            score_ratings([_verdict("a", "ghost", "real")], {"r0": "real"})

    def test_duplicate_rater_image_rejected(self):
        truth = {"r0": "real"}
        dup = [_verdict("a", "r0", "real"), _verdict("a", "r0", "fake")]
        with pytest.raises(DataError, match="duplicate"):
            score_ratings(dup, truth)

    def test_incomplete_and_unrated_listed(self):
        truth = {"r0": "real", "r1": "real"}
        scores = score_ratings([_verdict("a", "r0", "real")], truth, raters_expected=3)
        assert scores.incomplete == ["r0"]
        assert scores.unrated == ["r1"]

    def test_matches_brute_force_recount(self):
        cfg, verdicts = build_paper_fixture()
        truth = cfg.truth()
        scores = score_ratings(verdicts, truth)
        # independent recount straight off the raw verdicts
        for token in truth:
            expected = sum(1 for v in verdicts if v.token == token and
                           (v.verdict == "real") == (truth[token] == "real"))
            assert scores.per_image_correct[token] == expected


@pytest.fixture(scope="module")
def report():
    cfg, verdicts = build_paper_fixture()
    return study_report(cfg, verdicts)


class TestPaperFixture:
    def test_aggregates(self, report):
        s = report.scores
        assert s.fraction_marked_real == pytest.approx(0.77, abs=1e-12)
        assert s.real_accuracy == pytest.approx(0.84, abs=1e-12)
        assert s.synthetic_accuracy == pytest.approx(0.30, abs=1e-12)
        assert s.fooling_rate == pytest.approx(0.70, abs=1e-12)

    def test_class_rating_means(self, report):
        assert report.class_rating["real"].mean == pytest.approx(2.52, abs=0.01)
        assert report.class_rating["synthetic"].mean == pytest.approx(2.10, abs=0.01)

    def test_class_rating_sds_match_published(self, report):
        assert report.class_rating["real"].sd == pytest.approx(0.70, abs=0.005)
        assert report.class_rating["synthetic"].sd == pytest.approx(0.88, abs=0.005)

    def test_t_test_is_significant(self, report):
        assert report.t_test.p == pytest.approx(0.01, abs=0.005)

    def test_histogram_partitions_classes(self, report):
        assert sum(report.histogram["real"]) == 50
        assert sum(report.histogram["synthetic"]) == 50
        assert len(report.histogram["real"]) == 4

    def test_fixture_is_deterministic(self):
        a = build_paper_fixture()
        b = build_paper_fixture()
        assert a[0] == b[0]
        assert a[1] == b[1]

    def test_write_fixture_files(self, tmp_path):
        study_path, log_path = write_fixture(tmp_path)
        cfg = StudyConfig.from_json(study_path.read_text())
        store = VerdictStore(log_path)
        rep = study_report(cfg, store.snapshot())
        store.close()
        assert rep.scores.fraction_marked_real == pytest.approx(0.77)


class TestStudyReport:
    def test_all_correct_everywhere(self):
        cfg = StudyConfig(images=_images(2, 2))
        report = study_report(cfg, _full_verdicts(cfg, correct=True))
        # correct-count means equal the rater count; degenerate t reports p = 1
        assert report.class_correct["real"].mean == 3.0
        assert report.class_correct["synthetic"].mean == 3.0
        assert report.t_test.p == 1.0

    def test_incomplete_without_flag_rejected(self):
        cfg = StudyConfig(images=_images(2, 2))
        with pytest.raises(DataError, match="partial"):
            study_report(cfg, [_verdict("a", "r0", "real")])

    def test_partial_flag_allows_report(self):
        cfg = StudyConfig(images=_images(2, 2))
        report = study_report(cfg, [_verdict("a", "r0", "real"),
                                    _verdict("a", "r1", "real")],
                              allow_partial=True)
        assert report.warnings  # synthetic class empty

    def test_single_image_class_omits_statistics(self):
        cfg = StudyConfig(images=_images(1, 2))
        report = study_report(cfg, _full_verdicts(cfg), allow_partial=True)
        assert report.t_test is None
        assert any("fewer than 2" in w for w in report.warnings)

    def test_pearson_against_metric_series(self):
        cfg, verdicts = build_paper_fixture()
        series = {img.token: float(i) for i, img in enumerate(cfg.images)}
        report = study_report(cfg, verdicts, metric_series=series)
        assert report.pearson is not None
        assert -1.0 <= report.pearson <= 1.0
        assert report.pearson_n == 100

    def test_report_regeneration_identical(self):
        cfg, verdicts = build_paper_fixture()
        a = study_report(cfg, verdicts).to_json()
        b = study_report(cfg, verdicts).to_json()
        assert a == b

    def test_histogram_text_format(self):
        cfg, verdicts = build_paper_fixture()
        text = study_report(cfg, verdicts).histogram_text()
        lines = text.strip().splitlines()
        assert lines[0] == "rating\treal\tsynthetic"
        assert len(lines) == 5


class TestVerdictStore:
    def test_duplicate_rejected(self, tmp_path):
        store = VerdictStore(tmp_path / "v.jsonl")
        store.append(_verdict("a", "r0", "real"))
        with pytest.raises(DuplicateVerdictError):
            store.append(_verdict("a", "r0", "fake"))
        store.close()

    def test_reload_preserves_records(self, tmp_path):
        path = tmp_path / "v.jsonl"
        store = VerdictStore(path)
        store.append(_verdict("a", "r0", "real"))
        store.append(_verdict("b", "r0", "fake"))
        store.close()
        reloaded = VerdictStore(path)
        assert len(reloaded.snapshot()) == 2
        with pytest.raises(DuplicateVerdictError):
            reloaded.append(_verdict("a", "r0", "real"))
        reloaded.close()

    def test_append_only_lines(self, tmp_path):
        path = tmp_path / "v.jsonl"
        store = VerdictStore(path)
        for i in range(3):
            store.append(_verdict(f"r{i}", "r0", "real", ts=float(i)))
        store.close()
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        assert json.loads(lines[0])["rater_id"] == "r0"

    def test_invalid_verdict_value_rejected(self, tmp_path):
        store = VerdictStore()
        with pytest.raises(DataError):
            store.append(_verdict("a", "r0", "maybe"))
