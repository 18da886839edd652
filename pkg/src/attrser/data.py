"""Corpus manifests, label schemes, speaker-independent splits and batching.

A manifest is JSON Lines, one utterance per line with the fields
``utterance_id, audio_path, emotion, speaker, gender, language, corpus``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError
from .features import AugmentSpec, FBankFeatures, fix_length, spec_augment

log = logging.getLogger(__name__)

FIELDS = ("utterance_id", "audio_path", "emotion", "speaker", "gender", "language", "corpus")
GENDERS = ("male", "female")
OOD = "OOD"
DROP = "DROP"


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    audio_path: str
    emotion: str
    speaker: str
    gender: str
    language: str
    corpus: str

    @property
    def speaker_key(self) -> str:
        # speaker ids are only unique within a corpus
        return f"{self.corpus}/{self.speaker}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


def parse_record(obj: dict, where: str = "") -> UtteranceRecord:
    if not isinstance(obj, dict):
        raise DataError(f"{where}expected an object, got {type(obj).__name__}")
    missing = [f for f in FIELDS if f not in obj]
    if missing:
        raise DataError(f"{where}missing field(s) {', '.join(missing)}")
    values = {f: obj[f] for f in FIELDS}
    for f, v in values.items():
        if not isinstance(v, str) or not v.strip():
            raise DataError(f"{where}field {f!r} must be a non-empty string")
    if values["gender"] not in GENDERS:
        raise DataError(f"{where}gender must be one of {GENDERS}, got {values['gender']!r}")
    return UtteranceRecord(**values)


def load_manifest(path: str | Path) -> list[UtteranceRecord]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    records: list[UtteranceRecord] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}: "
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}malformed JSON ({exc.msg})") from None
        rec = parse_record(obj, where)
        if rec.utterance_id in seen:
            raise DataError(
                f"{where}duplicate utterance_id {rec.utterance_id!r} (first on line {seen[rec.utterance_id]})"
            )
        seen[rec.utterance_id] = lineno
        records.append(rec)
    if not records:
        log.warning("manifest %s contains no records", path)
    return records


def save_manifest(path: str | Path, records: Sequence[UtteranceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def resolve_audio(record: UtteranceRecord, manifest_path: str | Path | None) -> Path:
    p = Path(record.audio_path)
    if p.is_absolute() or manifest_path is None:
        return p
    return Path(manifest_path).parent / p


@dataclass
class LabelScheme:
    """``emotion_map`` values are class names, ``"OOD"`` or ``"DROP"``.

    ``default`` handles raw labels missing from the map; ``None`` means error.
    """

    name: str
    class_names: list
    emotion_map: dict
    default: str | None = None

    def __post_init__(self):
        targets = set(self.class_names) | {OOD, DROP}
        bad = {k: v for k, v in self.emotion_map.items() if v not in targets}
        if bad:
            raise ConfigError(f"scheme {self.name}: unknown targets {bad}")
        if self.default not in (None, OOD, DROP):
            raise ConfigError(f"scheme {self.name}: default must be OOD, DROP or None")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def route(self, raw: str):
        """Class index, ``"OOD"`` or ``"DROP"``."""
        key = raw.strip().lower()
        target = self.emotion_map.get(key, self.default)
        if target is None:
            raise DataError(f"scheme {self.name}: unmapped emotion label {raw!r}")
        if target in (OOD, DROP):
            return target
        return self.class_names.index(target)


def iemocap4_scheme() -> LabelScheme:
    keep = {
        "angry": "angry", "ang": "angry", "anger": "angry",
        "happy": "happy", "hap": "happy", "happiness": "happy",
        "excited": "happy", "exc": "happy", "excitement": "happy",
        "sad": "sad", "sadness": "sad",
        "neutral": "neutral", "neu": "neutral",
    }
    ood = ["frustrated", "fru", "frustration", "fear", "fea", "surprised", "sur", "surprise"]
    drop = ["disgust", "dis", "other", "oth", "xxx"]
    emap = dict(keep)
    emap.update({k: OOD for k in ood})
    emap.update({k: DROP for k in drop})
    return LabelScheme("iemocap4", ["angry", "happy", "sad", "neutral"], emap)


def cross_corpus5_scheme() -> LabelScheme:
    names = ["happy", "angry", "sad", "fear", "neutral"]
    return LabelScheme("cross_corpus5", names, {n: n for n in names}, default=OOD)


def emodb7_scheme() -> LabelScheme:
    names = ["angry", "boredom", "disgust", "fear", "happy", "neutral", "sad"]
    return LabelScheme("emodb7", names, {n: n for n in names})


SCHEMES = {"iemocap4": iemocap4_scheme, "cross_corpus5": cross_corpus5_scheme, "emodb7": emodb7_scheme}


def get_scheme(spec) -> LabelScheme:
    if isinstance(spec, LabelScheme):
        return spec
    if isinstance(spec, str):
        try:
            return SCHEMES[spec]()
        except KeyError:
            raise ConfigError(f"unknown label scheme {spec!r}; choose from {sorted(SCHEMES)}") from None
    if isinstance(spec, dict):
        return LabelScheme(**spec)
    raise ConfigError(f"cannot build a label scheme from {spec!r}")


@dataclass
class MappedRecords:
    kept: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    ood: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    def __len__(self):
        return len(self.kept) + len(self.ood) + len(self.dropped)


def map_labels(records: Sequence[UtteranceRecord], scheme: LabelScheme) -> MappedRecords:
    unmapped = set()
    out = MappedRecords()
    for rec in records:
        try:
            target = scheme.route(rec.emotion)
        except DataError:
            unmapped.add(rec.emotion)
            continue
        if target == OOD:
            out.ood.append(rec)
        elif target == DROP:
            out.dropped.append(rec)
        else:
            out.kept.append(rec)
            out.targets.append(target)
    if unmapped:
        raise DataError(f"scheme {scheme.name}: unmapped emotion labels {sorted(unmapped)}")
    return out


@dataclass
class Fold:
    train: frozenset
    valid: frozenset
    test: frozenset

    def check_disjoint(self) -> None:
        if self.train & self.valid or self.train & self.test or self.valid & self.test:
            raise DataError("speaker sets of train/valid/test overlap")

    def to_dict(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in ("train", "valid", "test")}


@dataclass
class SplitPlan:
    kind: str
    folds: list

    def check(self) -> None:
        for fold in self.folds:
            fold.check_disjoint()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "folds": [f.to_dict() for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        folds = [Fold(*(frozenset(f[k]) for k in ("train", "valid", "test"))) for f in d["folds"]]
        plan = cls(d["kind"], folds)
        plan.check()
        return plan

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def speakers_of(records: Sequence[UtteranceRecord]) -> list[str]:
    return sorted({r.speaker_key for r in records})


def make_kfold_splits(records: Sequence[UtteranceRecord], k: int, seed: int | None = None) -> SplitPlan:
    """Partition sorted speakers into ``k`` contiguous near-equal groups.

    Fold f tests group f and validates on group f+1 (cyclic) when k >= 3;
    with k = 2 there is no validation group. ``seed`` optionally shuffles
    the speaker order first.
    """
    speakers = speakers_of(records)
    if k < 2:
        raise ConfigError("k-fold needs k >= 2")
    if k > len(speakers):
        raise DataError(f"k={k} exceeds the {len(speakers)} distinct speakers")
    if seed is not None:
        speakers = list(np.random.default_rng(seed).permutation(speakers))
    groups = [frozenset(g) for g in np.array_split(np.array(speakers, dtype=object), k)]
    everyone = frozenset(speakers)
    folds = []
    for f in range(k):
        test = groups[f]
        valid = groups[(f + 1) % k] if k >= 3 else frozenset()
        folds.append(Fold(everyone - test - valid, valid, test))
    plan = SplitPlan("kfold_speaker_independent", folds)
    plan.check()
    return plan


def make_holdout_splits(records: Sequence[UtteranceRecord], seed: int) -> SplitPlan:
    """Per corpus: one random speaker validates, one tests, the rest train."""
    rng = np.random.default_rng(seed)
    by_corpus: dict[str, list[str]] = {}
    for key in speakers_of(records):
        by_corpus.setdefault(key.split("/", 1)[0], []).append(key)
    train, valid, test = set(), set(), set()
    for corpus in sorted(by_corpus):
        spk = by_corpus[corpus]
        if len(spk) < 3:
            raise DataError(f"corpus {corpus!r} has {len(spk)} speakers; holdout needs >= 3")
        picks = rng.choice(len(spk), size=2, replace=False)
        valid.add(spk[picks[0]])
        test.add(spk[picks[1]])
        train.update(s for i, s in enumerate(spk) if i not in picks)
    plan = SplitPlan("holdout_speaker_independent", [Fold(frozenset(train), frozenset(valid), frozenset(test))])
    plan.check()
    return plan


def select(records: Sequence[UtteranceRecord], speakers) -> list[UtteranceRecord]:
    speakers = set(speakers)
    return [r for r in records if r.speaker_key in speakers]


class AttributeVocab:
    """Maps attribute values (speaker, gender, ...) to dense class indices."""

    def __init__(self, values: dict):
        self.values = {name: list(v) for name, v in values.items()}
        self._index = {name: {x: i for i, x in enumerate(v)} for name, v in self.values.items()}

    @classmethod
    def build(cls, records: Sequence[UtteranceRecord], attributes: Sequence[str]) -> "AttributeVocab":
        values = {}
        for name in attributes:
            if name == "speaker":
                values[name] = speakers_of(records)
            elif name == "gender":
                values[name] = list(GENDERS)
            else:
                values[name] = sorted({getattr(r, name) for r in records})
        return cls(values)

    def num_classes(self, name: str) -> int:
        return len(self.values[name])

    def index(self, name: str, record: UtteranceRecord) -> int:
        value = record.speaker_key if name == "speaker" else getattr(record, name)
        try:
            return self._index[name][value]
        except KeyError:
            raise DataError(f"{name} value {value!r} was not seen when the vocabulary was built") from None

    def to_dict(self) -> dict:
        return dict(self.values)


@dataclass
class Example:
    """One utterance ready for the network."""

    utterance_id: str
    features: np.ndarray
    labels: dict


@dataclass
class Batch:
    utterance_ids: list
    features: object  # stacked (B, 1, T, F) tensor in train mode, list of (T, F) arrays in eval
    labels: dict

    def __len__(self):
        return len(self.utterance_ids)


def build_batches(
    examples: Sequence[Example],
    batch_size: int,
    seed: int = 0,
    mode: str = "train",
    epoch: int = 0,
    target_frames: int = 300,
    augment: AugmentSpec | None = AugmentSpec(),
) -> Iterator[Batch]:
    """Train: shuffle per (seed, epoch), crop/pad, SpecAugment. Eval: ordered, untouched."""
    if len(examples) == 0:
        raise DataError("cannot batch an empty set")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(examples)) if mode == "train" else np.arange(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        names = chunk[0].labels.keys()
        labels = {n: torch.tensor([ex.labels[n] for ex in chunk], dtype=torch.long) for n in names}
        ids = [ex.utterance_id for ex in chunk]
        if mode == "eval":
            yield Batch(ids, [ex.features for ex in chunk], labels)
            continue
        mats = []
        for ex in chunk:
            fb = fix_length(FBankFeatures(ex.features), target_frames, "train", rng)
            if augment is not None:
                fb = spec_augment(fb, augment, rng)
            mats.append(fb.values)
        x = torch.from_numpy(np.stack(mats).astype(np.float32)).unsqueeze(1)
        yield Batch(ids, x, labels)


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
