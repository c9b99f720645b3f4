"""Blind real-vs-fake rating study: scoring, statistics, and fixtures.

Terminology: every image gets two 0..raters counts. The *correct count*
is how many raters matched ground truth. The *rating* (the 0-3 scale the
histogram and the class means/t-test use) is how many raters marked the
image as real; for real images the two coincide. Both appear in the
report.

Verdicts are append-only: at most one verdict per (rater, image), and
re-generating a report from the same store yields an identical report.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest
from .errors import ConfigError, DataError
from .rng import stream, token_hex
from .stats import TTestResult, pearson_r, t_test_samples

VERDICTS = ("real", "fake")


@dataclass(frozen=True)
class StudyImage:
    token: str  # opaque 128-bit id, re-mapped per study
    path: str
    label: str  # "real" | "synthetic"


@dataclass
class StudyConfig:
    """Image set with hidden ground truth plus the session parameters."""

    images: list[StudyImage]
    raters_expected: int = 3
    shuffle_seed: int = 0
    admin_token: str = ""

    def __post_init__(self):
        if self.raters_expected < 1:
            raise ConfigError(f"raters_expected must be >= 1, got {self.raters_expected}")
        tokens = [img.token for img in self.images]
        if len(set(tokens)) != len(tokens):
            raise ConfigError("study image tokens must be unique")
        for img in self.images:
            if img.label not in ("real", "synthetic"):
                raise ConfigError(f"study image label must be real|synthetic, got {img.label!r}")

    @property
    def images_total(self) -> int:
        return len(self.images)

    @property
    def split(self) -> dict[str, int]:
        counts = {"real": 0, "synthetic": 0}
        for img in self.images:
            counts[img.label] += 1
        return counts

    def truth(self) -> dict[str, str]:
        return {img.token: img.label for img in self.images}

    def to_json(self) -> str:
        return json.dumps({
            "raters_expected": self.raters_expected,
            "shuffle_seed": self.shuffle_seed,
            "admin_token": self.admin_token,
            "images": [asdict(img) for img in self.images],
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StudyConfig":
        obj = json.loads(text)
        return cls(
            images=[StudyImage(**img) for img in obj["images"]],
            raters_expected=int(obj["raters_expected"]),
            shuffle_seed=int(obj["shuffle_seed"]),
            admin_token=str(obj["admin_token"]),
        )


def build_study(manifest: DatasetManifest, n_real: int, n_synthetic: int,
                shuffle_seed: int, admin_token: str,
                raters_expected: int = 3) -> StudyConfig:
    """Pick a labeled subset and assign opaque tokens, order-shuffled."""
    reals = manifest.by_label("real")
    synths = manifest.by_label("synthetic")
    if len(reals) < n_real:
        raise ConfigError(f"manifest has {len(reals)} real entries, need {n_real}")
    if len(synths) < n_synthetic:
        raise ConfigError(f"manifest has {len(synths)} synthetic entries, need {n_synthetic}")
    select = stream(shuffle_seed, "study-select")
    chosen = ([reals[i] for i in select.permutation(len(reals))[:n_real]]
              + [synths[i] for i in select.permutation(len(synths))[:n_synthetic]])
    token_rng = stream(shuffle_seed, "study-tokens")
    images = [StudyImage(token=token_hex(token_rng),
                         path=str(manifest.resolve(entry)), label=entry.label)
              for entry in chosen]
    order = stream(shuffle_seed, "study-order").permutation(len(images))
    return StudyConfig(images=[images[i] for i in order],
                       raters_expected=raters_expected,
                       shuffle_seed=shuffle_seed, admin_token=admin_token)


@dataclass(frozen=True)
class Verdict:
    session_id: str
    rater_id: str
    token: str
    verdict: str  # "real" | "fake"
    ts: float

    def to_json_line(self) -> str:
        return json.dumps({"session_id": self.session_id, "rater_id": self.rater_id,
                           "token": self.token, "verdict": self.verdict, "ts": self.ts})

    @classmethod
    def from_json_line(cls, line: str) -> "Verdict":
        obj = json.loads(line)
        return cls(session_id=str(obj["session_id"]), rater_id=str(obj["rater_id"]),
                   token=str(obj["token"]), verdict=str(obj["verdict"]), ts=float(obj["ts"]))


class DuplicateVerdictError(DataError):
    """A (rater, image) pair already has a stored verdict."""


class VerdictStore:
    """Append-only verdict log; a single serialized appender.

    When backed by a file, each verdict is flushed and fsynced before
    the append returns, so acknowledgments imply durability.
    """

    def __init__(self, path: "str | os.PathLike | None" = None):
        self._lock = threading.Lock()
        self._records: list[Verdict] = []
        self._seen: set[tuple[str, str]] = set()
        self._path = Path(path) if path is not None else None
        self._fh = None
        if self._path is not None:
            if self._path.exists():
                for line in self._path.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        self._restore(Verdict.from_json_line(line))
            self._fh = open(self._path, "a", encoding="utf-8")

    def _restore(self, verdict: Verdict) -> None:
        key = (verdict.rater_id, verdict.token)
        if key in self._seen:
            raise DataError(f"verdict log has duplicate verdict for {key}")
        self._seen.add(key)
        self._records.append(verdict)

    def append(self, verdict: Verdict) -> None:
        if verdict.verdict not in VERDICTS:
            raise DataError(f"verdict must be one of {VERDICTS}, got {verdict.verdict!r}")
        with self._lock:
            key = (verdict.rater_id, verdict.token)
            if key in self._seen:
                raise DuplicateVerdictError(f"duplicate verdict for rater "
                                            f"{verdict.rater_id!r} on image {verdict.token!r}")
            if self._fh is not None:
                self._fh.write(verdict.to_json_line() + "\n")
                self._fh.flush()
                os.fsync(self._fh.fileno())
            self._seen.add(key)
            self._records.append(verdict)

    def snapshot(self) -> list[Verdict]:
        with self._lock:
            return list(self._records)

    def rated_tokens(self, rater_id: str) -> set[str]:
        with self._lock:
            return {tok for (rater, tok) in self._seen if rater == rater_id}

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@dataclass
class RatingScores:
    per_image_correct: dict[str, int]
    per_image_real_votes: dict[str, int]
    per_image_total: dict[str, int]
    incomplete: list[str]
    unrated: list[str]
    fraction_marked_real: float
    real_accuracy: float | None
    synthetic_accuracy: float | None
    fooling_rate: float | None


def score_ratings(verdicts, truth: dict[str, str],
                  raters_expected: int = 3) -> RatingScores:
    """Per-image counts plus verdict-level aggregates.

    correct = verdict matches ground truth ("real" on real images,
    "fake" on synthetic ones). The fooling rate is the fraction of
    verdicts on synthetic images that said "real".
    """
    correct: dict[str, int] = {}
    real_votes: dict[str, int] = {}
    total: dict[str, int] = {}
    seen: set[tuple[str, str]] = set()
    marked_real = 0
    class_total = {"real": 0, "synthetic": 0}
    class_correct = {"real": 0, "synthetic": 0}
    n_verdicts = 0
    for v in verdicts:
        if v.token not in truth:
            raise DataError(f"verdict references unknown image {v.token!r}")
        if v.verdict not in VERDICTS:
            raise DataError(f"verdict must be one of {VERDICTS}, got {v.verdict!r}")
        key = (v.rater_id, v.token)
        if key in seen:
            raise DataError(f"duplicate verdict for {key}")
        seen.add(key)
        n_verdicts += 1
        label = truth[v.token]
        is_real_vote = v.verdict == "real"
        is_correct = (label == "real") == is_real_vote
        total[v.token] = total.get(v.token, 0) + 1
        correct[v.token] = correct.get(v.token, 0) + int(is_correct)
        real_votes[v.token] = real_votes.get(v.token, 0) + int(is_real_vote)
        marked_real += int(is_real_vote)
        class_total[label] += 1
        class_correct[label] += int(is_correct)
    incomplete = sorted(tok for tok, n in total.items() if n < raters_expected)
    unrated = sorted(tok for tok in truth if tok not in total)
    return RatingScores(
        per_image_correct=correct,
        per_image_real_votes=real_votes,
        per_image_total=total,
        incomplete=incomplete,
        unrated=unrated,
        fraction_marked_real=marked_real / n_verdicts if n_verdicts else 0.0,
        real_accuracy=(class_correct["real"] / class_total["real"]
                       if class_total["real"] else None),
        synthetic_accuracy=(class_correct["synthetic"] / class_total["synthetic"]
                            if class_total["synthetic"] else None),
        fooling_rate=(1.0 - class_correct["synthetic"] / class_total["synthetic"]
                      if class_total["synthetic"] else None),
    )


@dataclass
class ClassStats:
    mean: float
    sd: float  # population sd, matching how the source aggregates read
    n: int


@dataclass
class StudyReport:
    raters_expected: int
    images_total: int
    scores: RatingScores
    class_rating: dict[str, ClassStats]
    class_correct: dict[str, ClassStats]
    histogram: dict[str, list[int]]
    t_test: TTestResult | None
    t_test_welch: TTestResult | None
    pearson: float | None
    pearson_n: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def tt(r: TTestResult | None):
            return None if r is None else {"t": r.t, "df": r.df, "p": r.p, "variant": r.variant}

        return {
            "raters_expected": self.raters_expected,
            "images_total": self.images_total,
            "fraction_marked_real": self.scores.fraction_marked_real,
            "real_accuracy": self.scores.real_accuracy,
            "synthetic_accuracy": self.scores.synthetic_accuracy,
            "fooling_rate": self.scores.fooling_rate,
            "per_image_correct": self.scores.per_image_correct,
            "per_image_real_votes": self.scores.per_image_real_votes,
            "incomplete": self.scores.incomplete,
            "unrated": self.scores.unrated,
            "class_rating": {k: asdict(v) for k, v in self.class_rating.items()},
            "class_correct": {k: asdict(v) for k, v in self.class_correct.items()},
            "histogram": self.histogram,
            "t_test": tt(self.t_test),
            "t_test_welch": tt(self.t_test_welch),
            "pearson": self.pearson,
            "pearson_n": self.pearson_n,
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def histogram_text(self) -> str:
        """Fig-2-style rating histogram as delimited text."""
        lines = ["rating\treal\tsynthetic"]
        for level in range(self.raters_expected + 1):
            lines.append(f"{level}\t{self.histogram['real'][level]}"
                         f"\t{self.histogram['synthetic'][level]}")
        return "\n".join(lines) + "\n"


def _class_stats(values: list[int]) -> ClassStats:
    arr = np.asarray(values, dtype=np.float64)
    return ClassStats(mean=float(arr.mean()), sd=float(arr.std()), n=len(values))


def study_report(config: StudyConfig, verdicts,
                 metric_series: dict[str, float] | None = None,
                 allow_partial: bool = False) -> StudyReport:
    """Aggregate scores, per-class rating stats, Student t, optional Pearson r.

    The t test (and the Fig-2 histogram) runs on the per-class rating
    series (how many raters marked each image "real"); a degenerate
    zero-variance comparison reports p = 1 with a warning instead of
    failing. `metric_series` maps image token -> metric value and is
    correlated against the per-image rating.
    """
    truth = config.truth()
    scores = score_ratings(verdicts, truth, config.raters_expected)
    if (scores.unrated or scores.incomplete) and not allow_partial:
        raise DataError(f"study incomplete ({len(scores.unrated)} unrated, "
                        f"{len(scores.incomplete)} partially rated); "
                        "pass allow_partial to report anyway")
    warnings: list[str] = []
    rating_series: dict[str, list[int]] = {"real": [], "synthetic": []}
    correct_series: dict[str, list[int]] = {"real": [], "synthetic": []}
    histogram = {"real": [0] * (config.raters_expected + 1),
                 "synthetic": [0] * (config.raters_expected + 1)}
    for token, votes in scores.per_image_real_votes.items():
        label = truth[token]
        rating_series[label].append(votes)
        correct_series[label].append(scores.per_image_correct[token])
        histogram[label][min(votes, config.raters_expected)] += 1

    class_rating = {}
    class_correct = {}
    for label in ("real", "synthetic"):
        if rating_series[label]:
            class_rating[label] = _class_stats(rating_series[label])
            class_correct[label] = _class_stats(correct_series[label])
        else:
            warnings.append(f"no rated images in class {label!r}")

    t_res = t_welch = None
    if len(rating_series["real"]) >= 2 and len(rating_series["synthetic"]) >= 2:
        try:
            t_res = t_test_samples(rating_series["real"], rating_series["synthetic"], "student")
            t_welch = t_test_samples(rating_series["real"], rating_series["synthetic"], "welch")
        except DataError as err:
            warnings.append(f"t statistic undefined ({err}); p = 1 by convention")
            df = float(len(rating_series["real"]) + len(rating_series["synthetic"]) - 2)
            t_res = TTestResult(t=0.0, df=df, p=1.0, variant="student")
            t_welch = TTestResult(t=0.0, df=df, p=1.0, variant="welch")
    else:
        warnings.append("fewer than 2 rated images in a class; t statistics omitted")

    pearson = None
    pearson_n = 0
    if metric_series is not None:
        tokens = sorted(set(metric_series) & set(scores.per_image_real_votes))
        pearson_n = len(tokens)
        if pearson_n >= 2:
            try:
                pearson = pearson_r([scores.per_image_real_votes[t] for t in tokens],
                                    [metric_series[t] for t in tokens])
            except DataError as err:
                warnings.append(f"pearson undefined ({err})")
        else:
            warnings.append("metric series overlaps fewer than 2 rated images")

    return StudyReport(
        raters_expected=config.raters_expected,
        images_total=config.images_total,
        scores=scores,
        class_rating=class_rating,
        class_correct=class_correct,
        histogram=histogram,
        t_test=t_res,
        t_test_welch=t_welch,
        pearson=pearson,
        pearson_n=pearson_n,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# the aggregate-matching fixture
# ---------------------------------------------------------------------------

# Per-class multisets of "marked as real" counts over 50 images each.
# Chosen so every published aggregate holds simultaneously:
#   real:      mean 2.52, population sd 0.70, 126/150 = 84% marked real
#   synthetic: mean 2.10, population sd 0.88, 105/150 = 70% marked real
#   overall (126+105)/300 = 77% marked real; synthetic accuracy 30%.
FIXTURE_REAL_VOTE_COUNTS = {3: 31, 2: 15, 1: 3, 0: 1}
FIXTURE_SYNTHETIC_VOTE_COUNTS = {3: 19, 2: 20, 1: 8, 0: 3}
FIXTURE_RATERS = ("rater-1", "rater-2", "rater-3")


def build_paper_fixture(seed: int = 0) -> tuple[StudyConfig, list[Verdict]]:
    """Deterministic 100-image, 3-rater study matching the published aggregates."""
    token_rng = stream(seed, "fixture-tokens")
    images: list[StudyImage] = []
    votes_per_image: list[int] = []
    for label, counts in (("real", FIXTURE_REAL_VOTE_COUNTS),
                          ("synthetic", FIXTURE_SYNTHETIC_VOTE_COUNTS)):
        for votes, repeat in sorted(counts.items(), reverse=True):
            for _ in range(repeat):
                token = token_hex(token_rng)
                images.append(StudyImage(token=token, path=f"fixture/{token}.png", label=label))
                votes_per_image.append(votes)
    config = StudyConfig(images=images, raters_expected=3, shuffle_seed=seed,
                         admin_token="fixture-admin")
    verdicts: list[Verdict] = []
    ts = 0.0
    for j, (img, votes) in enumerate(zip(images, votes_per_image)):
        voters_real = {(j + i) % len(FIXTURE_RATERS) for i in range(votes)}
        for r, rater in enumerate(FIXTURE_RATERS):
            verdicts.append(Verdict(
                session_id=f"fixture-{rater}", rater_id=rater, token=img.token,
                verdict="real" if r in voters_real else "fake", ts=ts))
            ts += 1.0
    return config, verdicts


def write_fixture(out_dir, seed: int = 0) -> tuple[Path, Path]:
    """Write study.json + verdicts.jsonl for the aggregate-matching fixture."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config, verdicts = build_paper_fixture(seed)
    study_path = out / "study.json"
    study_path.write_text(config.to_json(), encoding="utf-8")
    log_path = out / "verdicts.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(v.to_json_line() + "\n")
    return study_path, log_path
