"""UASpeech-shaped corpus catalog and speaker-disjoint experiment splits."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import (
    DanglingSpeaker,
    DuplicateUtterance,
    InsufficientFiles,
    InvalidConfig,
    MalformedRow,
    SpeakerNotFound,
    TierMismatch,
    UnknownUtterance,
)
from .fsutil import atomic_write_bytes


class Cohort(str, enum.Enum):
    CONTROL = "Control"
    PATHOLOGY = "Pathology"


class Gender(str, enum.Enum):
    MALE = "Male"
    FEMALE = "Female"


class Tier(str, enum.Enum):
    CONTROL = "Control"
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"
    VERY_LOW = "VeryLow"


class Task(str, enum.Enum):
    DIGIT = "Digit"
    LETTER = "Letter"
    COMMAND = "Command"
    COMMON_WORD = "CommonWord"
    UNCOMMON_WORD = "UncommonWord"


class LabelScheme(str, enum.Enum):
    BINARY = "Binary"
    MULTICLASS5 = "Multiclass5"


class TaskSet(str, enum.Enum):
    WORDS = "Words"
    DIGITS_LETTERS = "DigitsLetters"


MULTICLASS_ORDER = (Tier.CONTROL, Tier.HIGH, Tier.MEDIUM, Tier.LOW, Tier.VERY_LOW)
BINARY_CLASS_NAMES = ("Control", "Pathology")
MULTICLASS_NAMES = tuple(t.value for t in MULTICLASS_ORDER)

# items per task, repetitions per item: 30 + 78 + 57 + 300 + 300 = 765 files
TASK_INVENTORY = {
    Task.DIGIT: (10, 3),
    Task.LETTER: (26, 3),
    Task.COMMAND: (19, 3),
    Task.COMMON_WORD: (100, 3),
    Task.UNCOMMON_WORD: (300, 1),
}
TASK_CODES = {
    Task.DIGIT: "D",
    Task.LETTER: "L",
    Task.COMMAND: "C",
    Task.COMMON_WORD: "CW",
    Task.UNCOMMON_WORD: "UW",
}

# repetition used wherever an experiment takes a single take of a repeated item
SELECTED_REPETITION = 1

TRAIN_CONTROL = ("CM01", "CF02")
BINARY_TRAIN_PATHOLOGY = {
    Tier.HIGH: ("F05", "M14"),
    Tier.MEDIUM: ("F04", "M11"),
    Tier.LOW: ("F02", "M16"),
    Tier.VERY_LOW: ("F03", "M12"),
}
MULTICLASS_TRAIN = {
    Tier.CONTROL: TRAIN_CONTROL,
    Tier.HIGH: ("M14", "F05"),
    Tier.MEDIUM: ("M11", "F04"),
    Tier.LOW: ("M16", "F02"),
    Tier.VERY_LOW: ("M12", "F03"),
}


def tier_for_intelligibility(pct: float) -> Tier:
    """UASpeech banding: 0-25 very low, 26-50 low, 51-75 mid, 76-100 high."""
    if not 0 <= pct <= 100:
        raise ValueError(f"intelligibility must be in [0, 100], got {pct}")
    if pct <= 25:
        return Tier.VERY_LOW
    if pct <= 50:
        return Tier.LOW
    if pct <= 75:
        return Tier.MEDIUM
    return Tier.HIGH


@dataclass(frozen=True)
class SpeakerRecord:
    speaker_id: str
    cohort: Cohort
    gender: Gender
    age: int | None
    intelligibility_pct: float | None
    tier: Tier

    def __post_init__(self):
        object.__setattr__(self, "cohort", Cohort(self.cohort))
        object.__setattr__(self, "gender", Gender(self.gender))
        object.__setattr__(self, "tier", Tier(self.tier))
        if not self.speaker_id:
            raise ValueError("speaker_id must be non-empty")
        if self.cohort is Cohort.CONTROL:
            if self.intelligibility_pct is not None:
                raise ValueError(f"control speaker {self.speaker_id} must not carry an intelligibility score")
            if self.tier is not Tier.CONTROL:
                raise ValueError(f"control speaker {self.speaker_id} must have tier Control")
        else:
            if self.tier is Tier.CONTROL:
                raise ValueError(f"pathology speaker {self.speaker_id} cannot have tier Control")
            if self.intelligibility_pct is not None:
                banded = tier_for_intelligibility(self.intelligibility_pct)
                if banded is not self.tier:
                    raise ValueError(
                        f"speaker {self.speaker_id}: {self.intelligibility_pct}% intelligibility "
                        f"bands as {banded.value}, not {self.tier.value}"
                    )


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    task: Task
    repetition: int
    audio_path: str
    label: str  # fine-grained class: the speaker's tier

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if not self.utterance_id:
            raise ValueError("utterance_id must be non-empty")
        if self.task is Task.UNCOMMON_WORD and self.repetition != 1:
            raise ValueError(f"{self.utterance_id}: uncommon words have a single repetition")
        if not 1 <= self.repetition <= 3:
            raise ValueError(f"{self.utterance_id}: repetition must be in 1..3")


@dataclass(frozen=True)
class Manifest:
    speakers: tuple[SpeakerRecord, ...]
    utterances: tuple[UtteranceRecord, ...]
    _speaker_index: dict = field(init=False, repr=False, compare=False)
    _utt_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "speakers", tuple(self.speakers))
        object.__setattr__(self, "utterances", tuple(self.utterances))
        speakers: dict[str, SpeakerRecord] = {}
        for s in self.speakers:
            if s.speaker_id in speakers:
                raise ValueError(f"duplicate speaker {s.speaker_id}")
            speakers[s.speaker_id] = s
        utts: dict[str, UtteranceRecord] = {}
        for u in self.utterances:
            if u.utterance_id in utts:
                raise DuplicateUtterance(f"duplicate utterance_id {u.utterance_id}")
            if u.speaker_id not in speakers:
                raise DanglingSpeaker(f"utterance {u.utterance_id} references unknown speaker {u.speaker_id}")
            utts[u.utterance_id] = u
        object.__setattr__(self, "_speaker_index", speakers)
        object.__setattr__(self, "_utt_index", utts)

    def speaker(self, speaker_id: str) -> SpeakerRecord:
        try:
            return self._speaker_index[speaker_id]
        except KeyError:
            raise SpeakerNotFound(f"speaker {speaker_id!r} is not in the manifest") from None

    def utterance(self, utterance_id: str) -> UtteranceRecord:
        try:
            return self._utt_index[utterance_id]
        except KeyError:
            raise UnknownUtterance(f"utterance {utterance_id!r} is not in the manifest") from None

    def has_speaker(self, speaker_id: str) -> bool:
        return speaker_id in self._speaker_index

    def utterances_of(self, speaker_id: str) -> list[UtteranceRecord]:
        return [u for u in self.utterances if u.speaker_id == speaker_id]

    def label_index(self, utterance_id: str, scheme: LabelScheme) -> int:
        spk = self.speaker(self.utterance(utterance_id).speaker_id)
        if LabelScheme(scheme) is LabelScheme.BINARY:
            return 0 if spk.cohort is Cohort.CONTROL else 1
        return MULTICLASS_ORDER.index(spk.tier)


def class_names(scheme: LabelScheme) -> tuple[str, ...]:
    return BINARY_CLASS_NAMES if LabelScheme(scheme) is LabelScheme.BINARY else MULTICLASS_NAMES


# --- CSV ---------------------------------------------------------------------

MANIFEST_HEADER = (
    "speaker_id",
    "cohort",
    "gender",
    "age",
    "intelligibility_pct",
    "tier",
    "utterance_id",
    "task",
    "repetition",
    "audio_path",
)


def _fmt_optional(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def manifest_to_csv(manifest: Manifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for u in manifest.utterances:
        s = manifest.speaker(u.speaker_id)
        writer.writerow(
            [
                s.speaker_id,
                s.cohort.value,
                s.gender.value,
                _fmt_optional(s.age),
                _fmt_optional(s.intelligibility_pct),
                s.tier.value,
                u.utterance_id,
                u.task.value,
                u.repetition,
                u.audio_path,
            ]
        )
    return buf.getvalue()


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    atomic_write_bytes(Path(path), manifest_to_csv(manifest).encode("utf-8"))


def _parse_optional_number(text: str, kind):
    text = text.strip()
    if text == "" or text.lower() == "unknown":
        return None
    return kind(text)


def parse_manifest(text: str, source: str = "<manifest>") -> Manifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow(f"{source}: empty file, header required") from None
    if tuple(h.strip() for h in header) != MANIFEST_HEADER:
        raise MalformedRow(f"{source}: header must be {','.join(MANIFEST_HEADER)}")

    speakers: dict[str, SpeakerRecord] = {}
    pending: list[tuple[int, dict]] = []
    rows: list[tuple[int, dict]] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise MalformedRow(f"{source}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        rec = dict(zip(MANIFEST_HEADER, (c.strip() for c in row)))
        rows.append((lineno, rec))
        if not (rec["cohort"] or rec["gender"] or rec["tier"]):
            # bare reference to a speaker described on another row
            pending.append((lineno, rec))
            continue
        try:
            spk = SpeakerRecord(
                speaker_id=rec["speaker_id"],
                cohort=Cohort(rec["cohort"]),
                gender=Gender(rec["gender"]),
                age=_parse_optional_number(rec["age"], int),
                intelligibility_pct=_parse_optional_number(rec["intelligibility_pct"], float),
                tier=Tier(rec["tier"]),
            )
        except ValueError as exc:
            raise MalformedRow(f"{source}:{lineno}: {exc}") from exc
        known = speakers.get(spk.speaker_id)
        if known is None:
            speakers[spk.speaker_id] = spk
        elif known != spk:
            raise MalformedRow(f"{source}:{lineno}: speaker {spk.speaker_id} attributes disagree with earlier rows")
    for lineno, rec in pending:
        if rec["speaker_id"] not in speakers:
            raise DanglingSpeaker(f"{source}:{lineno}: utterance {rec['utterance_id']} references unknown speaker {rec['speaker_id']}")

    utterances: list[UtteranceRecord] = []
    seen: set[str] = set()
    for lineno, rec in rows:
        try:
            utt = UtteranceRecord(
                utterance_id=rec["utterance_id"],
                speaker_id=rec["speaker_id"],
                task=Task(rec["task"]),
                repetition=int(rec["repetition"]),
                audio_path=rec["audio_path"],
                label=speakers[rec["speaker_id"]].tier.value,
            )
        except ValueError as exc:
            raise MalformedRow(f"{source}:{lineno}: {exc}") from exc
        if utt.utterance_id in seen:
            raise DuplicateUtterance(f"{source}:{lineno}: duplicate utterance_id {utt.utterance_id}")
        seen.add(utt.utterance_id)
        utterances.append(utt)
    return Manifest(tuple(speakers.values()), tuple(utterances))


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), str(path))


# --- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    experiment_name: str
    label_scheme: LabelScheme
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "label_scheme", LabelScheme(self.label_scheme))
        object.__setattr__(self, "train_ids", tuple(self.train_ids))
        object.__setattr__(self, "test_ids", tuple(self.test_ids))
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise InvalidConfig(f"{len(overlap)} utterance(s) appear in both train and test, e.g. {sorted(overlap)[0]}")

    def to_json(self) -> str:
        doc = {
            "experiment_name": self.experiment_name,
            "label_scheme": self.label_scheme.value,
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        try:
            doc = json.loads(text)
            return cls(doc["experiment_name"], LabelScheme(doc["label_scheme"]), doc["train_ids"], doc["test_ids"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidConfig):
                raise
            raise InvalidConfig(f"malformed split file: {exc!r}") from exc

    def save(self, path: str | Path) -> None:
        atomic_write_bytes(Path(path), self.to_json().encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "SplitSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class LeakageReport:
    shared_speakers: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.shared_speakers

    def __bool__(self) -> bool:
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return "ok: train and test speaker sets are disjoint"
        return "violation: speakers on both sides of the split: " + ", ".join(self.shared_speakers)


def speakers_of(ids: Iterable[str], manifest: Manifest) -> set[str]:
    return {manifest.utterance(i).speaker_id for i in ids}


def assert_speaker_disjoint(split: SplitSpec, manifest: Manifest) -> LeakageReport:
    """Report which speakers (if any) contribute to both train and test."""
    shared = speakers_of(split.train_ids, manifest) & speakers_of(split.test_ids, manifest)
    return LeakageReport(tuple(sorted(shared)))


def _word_set(u: UtteranceRecord) -> bool:
    if u.task is Task.COMMON_WORD:
        return u.repetition == SELECTED_REPETITION
    return u.task is Task.UNCOMMON_WORD


def _digits_letters(u: UtteranceRecord) -> bool:
    return u.task in (Task.DIGIT, Task.LETTER) and u.repetition == SELECTED_REPETITION


TASK_SET_FILTERS = {TaskSet.WORDS: _word_set, TaskSet.DIGITS_LETTERS: _digits_letters}


def _files_by_speaker(manifest: Manifest, keep) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {s.speaker_id: [] for s in manifest.speakers}
    for u in manifest.utterances:
        if keep(u):
            out[u.speaker_id].append(u.utterance_id)
    return out


def _check_inventory(files: dict[str, list[str]], needed: Iterable[str], what: str) -> None:
    """Every speaker in ``needed`` must hold the full item set seen in the corpus."""
    expected = max((len(v) for v in files.values()), default=0)
    if expected == 0:
        raise InsufficientFiles(f"manifest contains no {what} files")
    short = [f"{s} ({len(files[s])}/{expected})" for s in needed if len(files[s]) < expected]
    if short:
        raise InsufficientFiles(f"speakers missing {what} files: " + ", ".join(short))


def _require_speakers(manifest: Manifest, ids: Sequence[str]) -> None:
    missing = [s for s in ids if not manifest.has_speaker(s)]
    if missing:
        raise SpeakerNotFound("requested speakers absent from manifest: " + ", ".join(missing))


def build_binary_split(
    manifest: Manifest,
    tier: Tier | str,
    train_control: Sequence[str] = TRAIN_CONTROL,
    train_pathology: Sequence[str] | None = None,
) -> SplitSpec:
    """Control-vs-pathology split trained on two speakers per cohort.

    Each speaker contributes the word set (common words at the selected
    repetition plus every uncommon word). Every other speaker, of any tier,
    goes to test.
    """
    tier = Tier(tier)
    if tier is Tier.CONTROL:
        raise TierMismatch("binary experiments are named by a pathology tier")
    train_pathology = tuple(train_pathology or BINARY_TRAIN_PATHOLOGY[tier])
    train_control = tuple(train_control)
    if len(train_control) != 2 or len(train_pathology) != 2:
        raise ValueError("binary training uses exactly two control and two pathology speakers")
    _require_speakers(manifest, train_control + train_pathology)
    for sid in train_control:
        if manifest.speaker(sid).cohort is not Cohort.CONTROL:
            raise TierMismatch(f"{sid} is not a control speaker")
    for sid in train_pathology:
        if manifest.speaker(sid).tier is not tier:
            raise TierMismatch(f"{sid} is tier {manifest.speaker(sid).tier.value}, not {tier.value}")

    files = _files_by_speaker(manifest, _word_set)
    train_speakers = set(train_control + train_pathology)
    _check_inventory(files, [s.speaker_id for s in manifest.speakers], "word-set")
    train = [i for s in manifest.speakers if s.speaker_id in train_speakers for i in files[s.speaker_id]]
    test = [i for s in manifest.speakers if s.speaker_id not in train_speakers for i in files[s.speaker_id]]
    return SplitSpec(f"binary-{tier.value}", LabelScheme.BINARY, train, test)


def build_multiclass_split(
    manifest: Manifest,
    task_set: TaskSet | str,
    train_speakers: dict[Tier, Sequence[str]] | None = None,
) -> SplitSpec:
    """Five-class split: two fixed training speakers per class, the rest test."""
    task_set = TaskSet(task_set)
    train_speakers = {Tier(k): tuple(v) for k, v in (train_speakers or MULTICLASS_TRAIN).items()}
    if set(train_speakers) != set(MULTICLASS_ORDER):
        raise ValueError("multiclass training needs speakers for all five classes")
    for t in MULTICLASS_ORDER:
        if len(train_speakers[t]) < 2:
            raise InsufficientFiles(f"class {t.value} needs two training speakers")
        _require_speakers(manifest, train_speakers[t])
        for sid in train_speakers[t]:
            if manifest.speaker(sid).tier is not t:
                raise TierMismatch(f"{sid} is tier {manifest.speaker(sid).tier.value}, not {t.value}")
    files = _files_by_speaker(manifest, TASK_SET_FILTERS[task_set])
    _check_inventory(files, [s.speaker_id for s in manifest.speakers], task_set.value)
    chosen = {sid for ids in train_speakers.values() for sid in ids}
    train = [i for s in manifest.speakers if s.speaker_id in chosen for i in files[s.speaker_id]]
    test = [i for s in manifest.speakers if s.speaker_id not in chosen for i in files[s.speaker_id]]
    return SplitSpec(f"multiclass-{task_set.value}", LabelScheme.MULTICLASS5, train, test)


def split_counts(split: SplitSpec, manifest: Manifest) -> dict[str, dict[str, int]]:
    """Per-class file counts on each side, keyed by class name."""
    names = class_names(split.label_scheme)
    out = {}
    for side, ids in (("train", split.train_ids), ("test", split.test_ids)):
        counts = dict.fromkeys(names, 0)
        for i in ids:
            counts[names[manifest.label_index(i, split.label_scheme)]] += 1
        out[side] = counts
    return out
