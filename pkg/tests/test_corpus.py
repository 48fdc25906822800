import hashlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dysarthria_fewshot import corpus
from dysarthria_fewshot.corpus import (
    Cohort,
    Gender,
    LabelScheme,
    Manifest,
    SpeakerRecord,
    SplitSpec,
    Task,
    TaskSet,
    Tier,
    UtteranceRecord,
    assert_speaker_disjoint,
    build_binary_split,
    build_multiclass_split,
    load_manifest,
    parse_manifest,
    save_manifest,
    split_counts,
)
from dysarthria_fewshot.errors import (
    DanglingSpeaker,
    DuplicateUtterance,
    InsufficientFiles,
    MalformedRow,
    SpeakerNotFound,
    TierMismatch,
)
from dysarthria_fewshot.synth import SynthSpec, census, synth_corpus

HEADER = "speaker_id,cohort,gender,age,intelligibility_pct,tier,utterance_id,task,repetition,audio_path\n"


@pytest.fixture(scope="module")
def full():
    return census()


# --- manifest IO --------------------------------------------------------------


def test_load_two_rows(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(
        HEADER
        + "M05,Pathology,Male,21,58,Medium,M05_CW001_R1,CommonWord,1,corpus/M05/a.wav\n"
        + "CF02,Control,Female,,,Control,CF02_UW001_R1,UncommonWord,1,corpus/CF02/b.wav\n"
    )
    m = load_manifest(p)
    assert len(m.utterances) == 2 and len(m.speakers) == 2
    assert m.speaker("M05").tier is Tier.MEDIUM and m.speaker("M05").intelligibility_pct == 58.0
    assert m.speaker("CF02").age is None and m.speaker("CF02").intelligibility_pct is None
    assert m.utterance("M05_CW001_R1").label == "Medium"


def test_dangling_speaker_reference():
    text = HEADER + "M05,,,,,,M05_CW001_R1,CommonWord,1,a.wav\n"
    with pytest.raises(DanglingSpeaker):
        parse_manifest(text)
    ok = text + "M05,Pathology,Male,21,58,Medium,M05_CW002_R1,CommonWord,1,b.wav\n"
    assert len(parse_manifest(ok).utterances) == 2


def test_dangling_speaker_in_constructor():
    spk = SpeakerRecord("M05", Cohort.PATHOLOGY, Gender.MALE, 21, 58.0, Tier.MEDIUM)
    utt = UtteranceRecord("X_1", "M99", Task.DIGIT, 1, "a.wav", "Medium")
    with pytest.raises(DanglingSpeaker):
        Manifest((spk,), (utt,))


def test_duplicate_utterance():
    row = "M05,Pathology,Male,21,58,Medium,M05_CW001_R1,CommonWord,1,a.wav\n"
    with pytest.raises(DuplicateUtterance):
        parse_manifest(HEADER + row + row)


@pytest.mark.parametrize(
    "body",
    [
        "M05,Pathology,Male,21,58,Medium,M05_CW001_R1,CommonWord,1\n",  # short row
        "M05,Pathology,Male,21,58,Medium,M05_UW001_R2,UncommonWord,2,a.wav\n",  # uncommon rep 2
        "M05,Pathology,Male,21,58,High,M05_CW001_R1,CommonWord,1,a.wav\n",  # tier disagrees with 58%
        "CM01,Control,Male,,40,Control,CM01_D001_R1,Digit,1,a.wav\n",  # control with score
        "M05,Pathology,Robot,21,58,Medium,M05_CW001_R1,CommonWord,1,a.wav\n",
        "M05,Pathology,Male,21,58,Medium,M05_CW001_R1,CommonWord,four,a.wav\n",
    ],
)
def test_malformed_rows(body):
    with pytest.raises(MalformedRow):
        parse_manifest(HEADER + body)


def test_bad_header():
    with pytest.raises(MalformedRow):
        parse_manifest("speaker,cohort\n")


def test_full_census_round_trip(tmp_path, full):
    save_manifest(full, tmp_path / "m.csv")
    assert load_manifest(tmp_path / "m.csv") == full


speaker_st = st.builds(
    lambda i, cohort, gender, age, pct: (
        SpeakerRecord(f"C{i:02d}", Cohort.CONTROL, gender, age, None, Tier.CONTROL)
        if cohort == "c"
        else SpeakerRecord(f"P{i:02d}", Cohort.PATHOLOGY, gender, age, pct, corpus.tier_for_intelligibility(pct))
    ),
    st.integers(0, 99),
    st.sampled_from(["c", "p"]),
    st.sampled_from(list(Gender)),
    st.one_of(st.none(), st.integers(5, 90)),
    st.one_of(st.integers(0, 100).map(float), st.floats(0, 100, allow_nan=False).map(lambda x: round(x, 1))),
)


@st.composite
def manifests(draw):
    spks = draw(st.lists(speaker_st, min_size=1, max_size=6, unique_by=lambda s: s.speaker_id))
    utts = []
    for s in spks:
        n = draw(st.integers(1, 4))
        for k in range(n):
            task = draw(st.sampled_from(list(Task)))
            rep = 1 if task is Task.UNCOMMON_WORD else draw(st.integers(1, 3))
            uid = f"{s.speaker_id}_{k}"
            utts.append(UtteranceRecord(uid, s.speaker_id, task, rep, f"corpus/{s.speaker_id}/{uid}.wav", s.tier.value))
    return Manifest(tuple(spks), tuple(utts))


@settings(max_examples=60, deadline=None)
@given(manifests())
def test_manifest_round_trip_property(m):
    assert parse_manifest(corpus.manifest_to_csv(m)) == m


# --- census / synth -----------------------------------------------------------


def test_full_census(full):
    assert len(full.speakers) == 28
    assert sum(s.cohort is Cohort.CONTROL for s in full.speakers) == 13
    assert len(full.utterances) == 28 * 765 == 21420
    per = {}
    for u in full.utterances:
        per[u.speaker_id] = per.get(u.speaker_id, 0) + 1
    assert set(per.values()) == {765}


def test_table_two_tiers(full):
    tiers = {s.speaker_id: s.tier for s in full.speakers if s.cohort is Cohort.PATHOLOGY}
    assert sorted(k for k, v in tiers.items() if v is Tier.HIGH) == ["F05", "M08", "M09", "M10", "M14"]
    assert sorted(k for k, v in tiers.items() if v is Tier.MEDIUM) == ["F04", "M05", "M11"]
    assert sorted(k for k, v in tiers.items() if v is Tier.LOW) == ["F02", "M07", "M16"]
    assert sorted(k for k, v in tiers.items() if v is Tier.VERY_LOW) == ["F03", "M01", "M04", "M12"]


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_deterministic(tmp_path):
    spec = SynthSpec(scale=0.01)
    m1 = synth_corpus(tmp_path / "a", spec, seed=5)
    m2 = synth_corpus(tmp_path / "b", spec, seed=5)
    assert m1 == m2
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    m3 = synth_corpus(tmp_path / "c", spec, seed=6)
    assert m3 == m1
    assert _digest(tmp_path / "c") != _digest(tmp_path / "a")
    wavs = list((tmp_path / "a" / "corpus").rglob("*.wav"))
    assert len(wavs) == len(m1.utterances) == 28 * spec.files_per_speaker()
    assert load_manifest(tmp_path / "a" / "manifest.csv") == m1


# --- splits -------------------------------------------------------------------


@pytest.mark.parametrize("tier", [Tier.HIGH, Tier.MEDIUM, Tier.LOW, Tier.VERY_LOW])
def test_binary_split_counts(full, tier):
    split = build_binary_split(full, tier)
    counts = split_counts(split, full)
    assert counts["train"] == {"Control": 800, "Pathology": 800}
    assert counts["test"] == {"Control": 4400, "Pathology": 5200}
    assert len(split.test_ids) == (15 - 2) * 400 + (13 - 2) * 400
    assert assert_speaker_disjoint(split, full).ok


def test_binary_medium_named_speakers(full):
    split = build_binary_split(full, "Medium", ("CM01", "CF02"), ("F04", "M11"))
    assert corpus.speakers_of(split.train_ids, full) == {"CM01", "CF02", "F04", "M11"}
    assert split.experiment_name == "binary-Medium" and split.label_scheme is LabelScheme.BINARY
    uses = {full.utterance(i).task for i in split.train_ids}
    assert uses == {Task.COMMON_WORD, Task.UNCOMMON_WORD}
    assert all(full.utterance(i).repetition == 1 for i in split.train_ids)


def test_binary_split_errors(full):
    with pytest.raises(TierMismatch):
        build_binary_split(full, Tier.MEDIUM, train_pathology=("F05", "M14"))
    with pytest.raises(SpeakerNotFound):
        build_binary_split(full, Tier.MEDIUM, train_control=("CM01", "CM99"))
    short = Manifest(full.speakers, tuple(u for u in full.utterances if u.utterance_id != "M05_UW007_R1"))
    with pytest.raises(InsufficientFiles):
        build_binary_split(short, Tier.MEDIUM)


def test_multiclass_digits_letters(full):
    split = build_multiclass_split(full, TaskSet.DIGITS_LETTERS)
    counts = split_counts(split, full)
    assert counts["train"] == dict.fromkeys(corpus.MULTICLASS_NAMES, 72)
    assert len(split.train_ids) == 360
    assert len(split.test_ids) == 648
    test_control = counts["test"]["Control"]
    assert (test_control, 648 - test_control) == (396, 252)
    assert counts["test"] == {"Control": 396, "High": 108, "Medium": 36, "Low": 36, "VeryLow": 72}


def test_multiclass_words(full):
    split = build_multiclass_split(full, TaskSet.WORDS)
    counts = split_counts(split, full)
    assert counts["train"] == dict.fromkeys(corpus.MULTICLASS_NAMES, 800)
    assert counts["test"] == {"Control": 4400, "High": 1200, "Medium": 400, "Low": 400, "VeryLow": 800}
    assert assert_speaker_disjoint(split, full).ok


def test_multiclass_needs_two_speakers(full):
    layout = dict(corpus.MULTICLASS_TRAIN)
    layout[Tier.LOW] = ("M16",)
    with pytest.raises(InsufficientFiles):
        build_multiclass_split(full, TaskSet.WORDS, layout)


def test_scaled_census_keeps_ratios():
    spec = SynthSpec(scale=0.1)
    m = census(spec)
    words = spec.items(Task.COMMON_WORD) + spec.items(Task.UNCOMMON_WORD)
    dl = spec.items(Task.DIGIT) + spec.items(Task.LETTER)
    for tier in (Tier.HIGH, Tier.MEDIUM, Tier.LOW, Tier.VERY_LOW):
        c = split_counts(build_binary_split(m, tier), m)
        assert c["train"] == {"Control": 2 * words, "Pathology": 2 * words}
        assert c["test"] == {"Control": 11 * words, "Pathology": 13 * words}
    c = split_counts(build_multiclass_split(m, TaskSet.DIGITS_LETTERS), m)
    assert c["train"] == dict.fromkeys(corpus.MULTICLASS_NAMES, 2 * dl)
    assert c["test"]["Control"] == 11 * dl and sum(c["test"].values()) == 18 * dl


# --- leakage ------------------------------------------------------------------


def test_leakage_seeded_fault(full):
    split = build_binary_split(full, Tier.MEDIUM)
    # the test side keeps M05's other files, so M05 sits on both sides
    leaked = SplitSpec("leaky", LabelScheme.BINARY, split.train_ids + ("M05_CW001_R1",),
                       tuple(i for i in split.test_ids if i != "M05_CW001_R1"))
    report = assert_speaker_disjoint(leaked, full)
    assert not report.ok and report.shared_speakers == ("M05",)
    assert "M05" in report.describe()


def test_split_rejects_shared_utterance():
    with pytest.raises(ValueError):
        SplitSpec("x", LabelScheme.BINARY, ("a",), ("a",))


def test_split_json_round_trip(tmp_path, full):
    split = build_multiclass_split(full, TaskSet.DIGITS_LETTERS)
    split.save(tmp_path / "s.json")
    assert SplitSpec.load(tmp_path / "s.json") == split


def test_leakage_fuzz_small():
    rng = random.Random(0)
    m = census(SynthSpec(scale=0.01))
    ids = [u.utterance_id for u in m.utterances]
    for _ in range(200):
        rng.shuffle(ids)
        k = rng.randint(1, len(ids) - 1)
        split = SplitSpec("f", LabelScheme.BINARY, ids[:k], ids[k:])
        train_spk = {i.split("_")[0] for i in ids[:k]}
        test_spk = {i.split("_")[0] for i in ids[k:]}
        assert assert_speaker_disjoint(split, m).ok == (not (train_spk & test_spk))
