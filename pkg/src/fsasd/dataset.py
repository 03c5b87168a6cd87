"""DCASE-layout dataset handling: filename grammar, WAV I/O, scanning and
a synthetic desk-scale generator.

Layout::

    <root>/<machine_type>/train/section_00_source_train_normal_0000[_attrs].wav
    <root>/<machine_type>/test/section_00_0000[_attrs].wav          (blind)
    <root>/<machine_type>/test/section_00_target_test_anomaly_0003.wav  (labeled)
    <root>/ground_truth.csv
"""

from __future__ import annotations

import csv
import logging
import math
import wave
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeader,
    EmptyDataset,
    InvalidSpec,
    MalformedName,
    UnsupportedFormat,
)
from .io import atomic_write_text

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
DOMAINS = ("source", "target")
SPLITS = ("train", "test")
LABELS = ("normal", "anomaly")
UNKNOWN = "unknown"
GROUND_TRUTH_FIELDS = ("path", "machine_type", "section", "domain", "label")


@dataclass(frozen=True)
class ClipMeta:
    machine_type: str
    section: int
    domain: str
    split: str
    label: str
    clip_id: str
    path: Path | None = None
    attrs: str = ""

    def __post_init__(self):
        if self.split == "train" and self.label != "normal":
            raise ValueError("training clips must be normal")

    @property
    def blind(self) -> bool:
        return self.domain == UNKNOWN and self.label == UNKNOWN


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class DatasetManifest:
    root: Path
    clips: list[ClipMeta]
    counts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if not self.counts:
            self.counts = count_clips(self.clips)

    def relpath(self, clip: ClipMeta) -> str:
        return Path(clip.path).relative_to(self.root).as_posix()

    def machine_types(self) -> list[str]:
        return sorted({c.machine_type for c in self.clips})

    def sections(self, machine_type: str) -> list[int]:
        return sorted({c.section for c in self.clips if c.machine_type == machine_type})

    def select(self, machine_type=None, section=None, split=None, domain=None, label=None):
        out = []
        for c in self.clips:
            if machine_type is not None and c.machine_type != machine_type:
                continue
            if section is not None and c.section != section:
                continue
            if split is not None and c.split != split:
                continue
            if domain is not None and c.domain != domain:
                continue
            if label is not None and c.label != label:
                continue
            out.append(c)
        return out

    def with_truth(self, truth: dict[str, dict]) -> "DatasetManifest":
        """Fill blind clips' domain/label from a ground-truth table.

        Only evaluation and tests should call this; the scoring path works
        on the blind manifest.
        """
        clips = []
        for c in self.clips:
            row = truth.get(self.relpath(c))
            if row is not None and c.blind:
                c = replace(c, domain=row["domain"], label=row["label"])
            clips.append(c)
        return DatasetManifest(self.root, clips)


def count_clips(clips) -> Counter:
    return Counter((c.machine_type, c.section, c.domain, c.split, c.label) for c in clips)


# ---------------------------------------------------------------- filenames

def parse_filename(name: str, machine_type: str = "") -> ClipMeta:
    """Parse ``section_NN_<domain>_<split>_<label>_<idx>[_attrs].wav``.

    The blind test form ``section_NN_<idx>[_attrs].wav`` yields a test clip
    with unknown domain and label. Token numbers in errors are 1-based.
    """
    stem = name[:-4] if name.lower().endswith(".wav") else name
    tokens = stem.split("_")
    if tokens[0] != "section":
        raise MalformedName(name, 1, "expected 'section'")
    if len(tokens) < 2 or not tokens[1].isdigit():
        raise MalformedName(name, 2, "section number must be numeric")
    section = int(tokens[1])
    if len(tokens) < 3:
        raise MalformedName(name, 3, "missing clip index")
    if tokens[2].isdigit():
        return ClipMeta(machine_type, section, UNKNOWN, "test", UNKNOWN,
                        tokens[2], attrs="_".join(tokens[3:]))
    expect = ((2, DOMAINS, "domain"), (3, SPLITS, "split"), (4, LABELS, "label"))
    for i, allowed, what in expect:
        if len(tokens) <= i:
            raise MalformedName(name, i + 1, f"missing {what}")
        if tokens[i] not in allowed:
            raise MalformedName(name, i + 1, f"invalid {what} {tokens[i]!r}")
    domain, split, label = tokens[2], tokens[3], tokens[4]
    if split == "train" and label != "normal":
        raise MalformedName(name, 5, "training clips must be normal")
    if len(tokens) < 6 or not tokens[5].isdigit():
        raise MalformedName(name, 6, "clip index must be numeric")
    return ClipMeta(machine_type, section, domain, split, label, tokens[5],
                    attrs="_".join(tokens[6:]))


def render_filename(meta: ClipMeta) -> str:
    tail = f"_{meta.attrs}" if meta.attrs else ""
    if meta.blind:
        return f"section_{meta.section:02d}_{meta.clip_id}{tail}.wav"
    return (f"section_{meta.section:02d}_{meta.domain}_{meta.split}_{meta.label}_"
            f"{meta.clip_id}{tail}.wav")


# ---------------------------------------------------------------- WAV

def read_wav(path, expected_rate: int | None = None) -> AudioClip:
    """Read a 16-bit PCM mono WAV file, scaled to [-1, 1) by 1/32768."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, nframes = (w.getnchannels(), w.getsampwidth(),
                                              w.getframerate(), w.getnframes())
            if channels != 1:
                raise UnsupportedFormat(f"{path}: {channels} channels, expected mono")
            if width != 2:
                raise UnsupportedFormat(f"{path}: {8 * width}-bit samples, expected 16")
            raw = w.readframes(nframes)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormat(f"{path}: {msg}") from exc
        raise CorruptHeader(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise CorruptHeader(f"{path}: truncated header") from exc
    if len(raw) != 2 * nframes:
        raise CorruptHeader(f"{path}: header declares {nframes} frames, "
                            f"payload holds {len(raw) // 2}")
    if expected_rate is not None and rate != expected_rate:
        raise UnsupportedFormat(f"{path}: sample rate {rate} Hz, expected {expected_rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples) -> np.ndarray:
    samples = np.asarray(samples)
    if samples.dtype == np.int16:
        return samples
    return np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE):
    """Write mono 16-bit PCM. int16 input is written verbatim."""
    pcm = to_pcm16(samples)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.astype("<i2").tobytes())


# ---------------------------------------------------------------- scanning

def scan_dataset(root) -> DatasetManifest:
    root = Path(root).resolve()
    clips = []
    if root.is_dir():
        for mt_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            for split in SPLITS:
                split_dir = mt_dir / split
                if not split_dir.is_dir():
                    continue
                for wav in sorted(split_dir.glob("*.wav")):
                    try:
                        meta = parse_filename(wav.name, mt_dir.name)
                    except MalformedName as exc:
                        raise MalformedName(str(wav), exc.token, str(exc)) from exc
                    if meta.split != split:
                        raise MalformedName(str(wav), 4, f"file lives under {split}/")
                    clips.append(replace(meta, path=wav))
    if not clips:
        raise EmptyDataset(f"no .wav files under {root}")
    return DatasetManifest(root, clips)


def load_ground_truth(path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != GROUND_TRUTH_FIELDS:
            raise CorruptHeader(f"{path}: expected columns {','.join(GROUND_TRUTH_FIELDS)}")
        return {row["path"]: dict(row, section=int(row["section"])) for row in reader}


def write_ground_truth(path, rows):
    rows = sorted(rows, key=lambda r: r["path"])
    lines = [",".join(GROUND_TRUTH_FIELDS)]
    lines += [",".join(str(r[k]) for k in GROUND_TRUTH_FIELDS) for r in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------- synthesis

ANOMALY_TYPES = ("noise_burst", "harmonic_drop")


@dataclass(frozen=True)
class MachineSpec:
    name: str
    base_freqs: tuple[float, ...]
    anomaly: str = "noise_burst"


DEFAULT_MACHINES = (
    MachineSpec("toycar", (180.0, 360.0, 540.0, 900.0, 1440.0), "noise_burst"),
    MachineSpec("valve", (250.0, 500.0, 1000.0, 1750.0, 2600.0), "harmonic_drop"),
)


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale stand-in for the DCASE domain-generalization data.

    Counts are per section; ``test_normal``/``test_anomaly`` are per domain.
    """
    machines: tuple[MachineSpec, ...] = DEFAULT_MACHINES
    sections: int = 1
    train_source: int = 99
    train_target: int = 1
    test_normal: int = 20
    test_anomaly: int = 20
    duration: float = 2.0
    sample_rate: int = SAMPLE_RATE
    pitch_factor: float = 1.25
    section_spread: float = 0.15
    signal_rms: float = 0.1
    noise_level: float = 0.01
    target_noise_gain: float = 8.0
    speed_jitter: float = 0.0
    level_jitter_db: float = 3.0
    am_depth_db: float = 0.0
    anomaly_snr_db: float = 0.0
    blind_test: bool = True

    def validate(self):
        for name in ("sections", "train_source", "train_target", "test_normal", "test_anomaly"):
            if getattr(self, name) <= 0:
                raise InvalidSpec(f"{name} must be positive")
        if self.train_source != 99 * self.train_target:
            raise InvalidSpec("source:target training counts must keep the 99:1 ratio")
        if self.pitch_factor <= 0:
            raise InvalidSpec("pitch_factor must be positive")
        if self.duration <= 0 or self.sample_rate <= 0:
            raise InvalidSpec("duration and sample_rate must be positive")
        if not self.machines:
            raise InvalidSpec("at least one machine type is required")
        names = [m.name for m in self.machines]
        if len(set(names)) != len(names) or any("_" in n or "/" in n for n in names):
            raise InvalidSpec("machine names must be unique and free of '_' and '/'")
        for m in self.machines:
            if m.anomaly not in ANOMALY_TYPES:
                raise InvalidSpec(f"unknown anomaly type {m.anomaly!r}")
            if not m.base_freqs or any(f <= 0 or f >= self.sample_rate / 2 for f in m.base_freqs):
                raise InvalidSpec(f"{m.name}: base frequencies must lie in (0, Nyquist)")


def _clip_rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def synth_clip(spec: SynthSpec, machine: MachineSpec, section: int, domain: str,
               anomalous: bool, rng) -> np.ndarray:
    """One clip: jittered harmonic tone + white noise, optionally perturbed."""
    n = int(round(spec.duration * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    shift = spec.pitch_factor if domain == "target" else 1.0
    scale = (1.0 + spec.section_spread * section) * shift
    freqs = np.asarray(machine.base_freqs) * scale
    speed = 1.0 + spec.speed_jitter * rng.standard_normal()
    amps = 1.0 / np.arange(1, len(freqs) + 1) * rng.uniform(0.9, 1.1, len(freqs))
    freqs = freqs * speed * (1.0 + rng.normal(0.0, 0.002, len(freqs)))
    phases = rng.uniform(0.0, 2 * np.pi, len(freqs))
    dropped = anomalous and machine.anomaly == "harmonic_drop"
    keep = np.ones(len(freqs), dtype=bool)
    if dropped:
        keep[int(rng.integers(0, min(2, len(freqs))))] = False
    am_rates = rng.uniform(0.5, 2.0, len(freqs))
    am_phases = rng.uniform(0.0, 2 * np.pi, len(freqs))
    tone = np.zeros(n)
    for f, a, ph, k, ar, ap in zip(freqs, amps, phases, keep, am_rates, am_phases):
        if k and f < spec.sample_rate / 2:
            env = 10 ** (spec.am_depth_db * np.sin(2 * np.pi * ar * t + ap) / 20)
            tone += a * env * np.sin(2 * np.pi * f * t + ph)
    # normalize the intact tone so a dropped harmonic also lowers the energy
    ref = np.sqrt(np.sum(amps[freqs < spec.sample_rate / 2] ** 2) / 2)
    tone *= spec.signal_rms / ref
    noise_std = spec.noise_level * (spec.target_noise_gain if domain == "target" else 1.0)
    noise_std *= 10 ** (spec.level_jitter_db * rng.uniform(-1.0, 1.0) / 20)
    x = tone + rng.normal(0.0, noise_std, n)
    if anomalous and machine.anomaly == "noise_burst":
        length = n // 2
        start = int(rng.integers(0, n - length + 1))
        burst_std = spec.signal_rms * 10 ** (-spec.anomaly_snr_db / 20)
        x[start:start + length] += rng.normal(0.0, burst_std, length)
    return np.clip(x, -1.0, 1.0 - 1.0 / 32768)


def synthesize_dataset(spec: SynthSpec, out_dir, seed: int) -> DatasetManifest:
    """Write a WAV tree plus ``ground_truth.csv``; deterministic for a seed.

    Returns the manifest with true domain/label on every clip.
    """
    spec.validate()
    out_dir = Path(out_dir).resolve()
    clips, truth = [], []
    for mi, machine in enumerate(spec.machines):
        for section in range(spec.sections):
            plan = [("source", "train", False, i) for i in range(spec.train_source)]
            plan += [("target", "train", False, i) for i in range(spec.train_target)]
            test = []
            for d in DOMAINS:
                test += [(d, "test", False, i) for i in range(spec.test_normal)]
                test += [(d, "test", True, i) for i in range(spec.test_anomaly)]
            order = _clip_rng(seed, mi, section, 99).permutation(len(test))
            train_idx = {"source": 0, "target": 0}
            for pos, (domain, split, anomalous, i) in enumerate(plan + [test[j] for j in order]):
                kind = (DOMAINS.index(domain), SPLITS.index(split), int(anomalous), i)
                x = synth_clip(spec, machine, section, domain, anomalous,
                               _clip_rng(seed, mi, section, *kind))
                label = "anomaly" if anomalous else "normal"
                if split == "train":
                    idx = train_idx[domain]
                    train_idx[domain] += 1
                else:
                    idx = pos - len(plan)
                meta = ClipMeta(machine.name, section, domain, split, label, f"{idx:04d}")
                named = meta
                if split == "test" and spec.blind_test:
                    named = replace(meta, domain=UNKNOWN, label=UNKNOWN)
                path = out_dir / machine.name / split / render_filename(named)
                write_wav(path, x, spec.sample_rate)
                clips.append(replace(meta, path=path))
                truth.append({"path": path.relative_to(out_dir).as_posix(),
                              "machine_type": machine.name, "section": section,
                              "domain": domain, "label": label})
    write_ground_truth(out_dir / "ground_truth.csv", truth)
    log.info("synthesized %d clips under %s", len(clips), out_dir)
    return DatasetManifest(out_dir, sorted(clips, key=lambda c: str(c.path)))


def clip_rms(samples) -> float:
    return math.sqrt(float(np.mean(np.square(samples))))
