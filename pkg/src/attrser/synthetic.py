"""Small synthetic corpora with separable tone-coded emotions.

Each ID emotion is a fixed carrier tone; speakers add a weak second tone and
a gender-dependent amplitude wobble. OOD emotions are broadband noise, which
no ID tone resembles.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import UtteranceRecord, save_manifest
from .features import Waveform, write_wav

EMOTION_TONES = {"angry": 350.0, "happy": 900.0, "sad": 1800.0, "neutral": 3400.0}
DEFAULT_OOD = ("frustrated",)


def synth_utterance(
    rng: np.random.Generator,
    emotion: str,
    speaker_index: int,
    female: bool,
    duration: float = 0.8,
    sample_rate: int = 16000,
) -> np.ndarray:
    t = np.arange(int(duration * sample_rate)) / sample_rate
    noise = 0.02 * rng.standard_normal(t.size)
    if emotion not in EMOTION_TONES:
        return np.clip(0.5 * rng.standard_normal(t.size), -1, 1)
    f0 = EMOTION_TONES[emotion] * (1.0 + rng.uniform(-0.02, 0.02))
    spk = 5000.0 + 300.0 * speaker_index
    wobble = 1.0 + (0.3 if female else 0.1) * np.sin(2 * np.pi * (6.0 if female else 3.0) * t)
    x = 0.6 * wobble * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    x += 0.1 * np.sin(2 * np.pi * spk * t)
    return x + noise


def make_corpus(
    out_dir: str | Path,
    num_speakers: int = 5,
    utts_per_class: int = 2,
    emotions=tuple(EMOTION_TONES),
    ood_emotions=DEFAULT_OOD,
    ood_per_speaker: int = 0,
    duration: float = 0.8,
    corpus: str = "synth",
    language: str = "en",
    seed: int = 0,
) -> Path:
    """Write wav files plus ``manifest.jsonl`` into ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for s in range(num_speakers):
        female = s % 2 == 1
        plan = [(e, i) for e in emotions for i in range(utts_per_class)]
        plan += [(ood_emotions[i % len(ood_emotions)], i) for i in range(ood_per_speaker)] if ood_emotions else []
        for emotion, i in plan:
            uid = f"{corpus}_s{s:02d}_{emotion}_{i:02d}"
            wav = synth_utterance(rng, emotion, s, female, duration)
            rel = Path("wav") / f"{uid}.wav"
            write_wav(out / rel, Waveform(wav / max(1e-9, np.max(np.abs(wav))) * 0.9))
            records.append(
                UtteranceRecord(uid, str(rel), emotion, f"spk{s:02d}",
                                "female" if female else "male", language, corpus)
            )
    manifest = out / "manifest.jsonl"
    save_manifest(manifest, records)
    return manifest
