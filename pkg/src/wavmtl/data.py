"""WAV I/O, utterance slicing, synthetic corpora and per-task batch loaders."""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import make_rng

SAMPLE_RATE = 16000
KWS_SAMPLES = SAMPLE_RATE        # 1 s keyword clips
SV_SAMPLES = 2 * SAMPLE_RATE     # 2 s speaker slices

KWS = "kws"
SV = "sv"
TASK_LENGTHS = {KWS: KWS_SAMPLES, SV: SV_SAMPLES}


class WavFormatError(ValueError):
    """A WAV file violates the RIFF / PCM16 / mono / 16 kHz contract."""


@dataclass
class WavClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise WavFormatError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.size and np.abs(self.samples).max() > 1.0:
            raise ValueError(f"clip {self.source_id!r} has samples outside [-1, 1]")

    def __len__(self):
        return len(self.samples)


@dataclass
class LabeledUtterance:
    clip: WavClip
    task: str
    label: int


@dataclass
class TrialPair:
    clip_a: WavClip
    clip_b: WavClip
    same_speaker: bool


@dataclass
class Batch:
    inputs: np.ndarray          # (B, L)
    labels: np.ndarray          # (B,)
    task: str
    keys: list = field(default_factory=list)   # (source_id, slice start) per row


# -- WAV ------------------------------------------------------------------------

def read_wav(path) -> WavClip:
    """Read a PCM16 mono 16 kHz RIFF/WAVE file, scaled by 1/32768."""
    try:
        reader = wave.open(os.fspath(path), "rb")
    except wave.Error as exc:
        raise WavFormatError(f"{path}: not a RIFF/WAVE PCM file ({exc})") from exc
    with reader:
        if reader.getcomptype() != "NONE":
            raise WavFormatError(f"{path}: compressed WAV ({reader.getcomptype()}) is not PCM")
        if reader.getsampwidth() != 2:
            raise WavFormatError(f"{path}: sample width must be 16-bit PCM, got {8 * reader.getsampwidth()}-bit")
        if reader.getnchannels() != 1:
            raise WavFormatError(f"{path}: must be mono, got {reader.getnchannels()} channels")
        if reader.getframerate() != SAMPLE_RATE:
            raise WavFormatError(f"{path}: sample rate must be {SAMPLE_RATE} Hz, got {reader.getframerate()}")
        raw = reader.readframes(reader.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return WavClip(pcm.astype(np.float64) / 32768.0, SAMPLE_RATE, str(path))


def to_pcm16(samples):
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, clip):
    samples = clip.samples if isinstance(clip, WavClip) else clip
    with wave.open(os.fspath(path), "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(SAMPLE_RATE)
        writer.writeframes(to_pcm16(samples).tobytes())


# -- slicing -----------------------------------------------------------------------

def slice_start(n_samples, length, rng):
    if n_samples <= length:
        return 0
    return int(rng.integers(0, n_samples - length + 1))


def slice_utterance(clip, length_samples, rng, start=None):
    """Random contiguous slice of ``length_samples``; zero right-pad if short."""
    if length_samples < 1:
        raise ValueError(f"slice length must be >= 1, got {length_samples}")
    n = len(clip.samples)
    if n >= length_samples:
        if start is None:
            start = slice_start(n, length_samples, rng)
        out = clip.samples[start:start + length_samples]
    else:
        out = np.concatenate([clip.samples, np.zeros(length_samples - n)])
    return WavClip(out.copy(), clip.sample_rate, clip.source_id)


# -- loaders -------------------------------------------------------------------------

class Loader:
    """Endless shuffled mini-batches over one task's utterances.

    Epochs reshuffle with the loader's own generator; the final short batch
    of an epoch is kept. Clips are cut or padded to the task length.
    """

    def __init__(self, utterances, batch_size, seed, task=None, length=None, name="loader"):
        if not utterances:
            raise ValueError("loader needs a non-empty dataset")
        if batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {batch_size}")
        self.utterances = list(utterances)
        self.batch_size = batch_size
        self.task = task or self.utterances[0].task
        self.length = length or TASK_LENGTHS[self.task]
        self.rng = make_rng(seed, "loader", name)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0
        self.epoch = -1

    def _new_epoch(self):
        self._order = self.rng.permutation(len(self.utterances))
        self._pos = 0
        self.epoch += 1

    def next_batch(self):
        if self._pos >= len(self._order):
            self._new_epoch()
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += len(idx)
        rows, labels, keys = [], [], []
        for i in idx:
            utt = self.utterances[i]
            start = slice_start(len(utt.clip), self.length, self.rng)
            rows.append(slice_utterance(utt.clip, self.length, self.rng, start).samples)
            labels.append(utt.label)
            keys.append((utt.clip.source_id, start))
        return Batch(np.stack(rows), np.asarray(labels, dtype=np.int64), self.task, keys)

    __next__ = next_batch

    def __iter__(self):
        return self


def next_batch(loader):
    return loader.next_batch()


# -- synthetic corpus ----------------------------------------------------------------

@dataclass
class SynthSpec:
    n_keywords: int = 12
    n_speakers: int = 20
    clips_per_class: int = 40
    kws_test_per_class: int = 10
    heldout_speakers: int = 4
    n_pairs: int = 200
    seed: int = 7

    def validate(self):
        if self.n_keywords < 2:
            raise ValueError(f"data.n_keywords must be >= 2, got {self.n_keywords}")
        if self.n_speakers < 4:
            raise ValueError(f"data.n_speakers must be >= 4, got {self.n_speakers}")
        if self.clips_per_class < 2:
            raise ValueError(f"data.clips_per_class must be >= 2, got {self.clips_per_class}")
        if self.heldout_speakers < 2 or self.n_speakers - self.heldout_speakers < 2:
            raise ValueError(
                f"cannot hold out {self.heldout_speakers} of {self.n_speakers} speakers: "
                "need >= 2 held-out and >= 2 training speakers")
        if self.n_pairs < 2:
            raise ValueError(f"data.n_pairs must be >= 2, got {self.n_pairs}")


@dataclass
class SynthCorpus:
    kws_train: list
    kws_test: list
    sv_train: list
    trials: list
    keyword_names: list
    train_speakers: list
    heldout_speakers: list


_VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [530, 1840, 2480], [660, 1720, 2410],
    [300, 870, 2240], [640, 1190, 2390], [440, 1020, 2240], [490, 1350, 1690],
    [400, 1900, 2600], [600, 1000, 2500], [350, 1500, 2700], [750, 1400, 2600],
], dtype=float)


def _voiced(n, f0, formants, rng, tilt=1.0, bandwidth=120.0, phases=None):
    """Harmonic stack at pitch ``f0`` shaped by Gaussian formant bumps.

    One pitch period is synthesised and tiled, so the pitch is rounded to a
    whole number of samples per period. Harmonic phases come from ``phases``
    when given, else from ``rng``.
    """
    period = max(2, int(round(SAMPLE_RATE / f0)))
    f0 = SAMPLE_RATE / period
    t = np.arange(period) / SAMPLE_RATE
    harmonics = np.arange(1, int(3800 // f0) + 1) * f0
    gains = sum(np.exp(-0.5 * ((harmonics - f) / bandwidth) ** 2) for f in formants)
    gains = gains * (harmonics / f0) ** (-0.3 * tilt) + 0.02
    if phases is None:
        phases = rng.uniform(0, 2 * np.pi, size=harmonics.size)
    phases = phases[:harmonics.size]
    cycle = np.sin(2 * np.pi * harmonics[None, :] * t[:, None] + phases) @ gains
    sig = np.resize(cycle, n)
    return sig / (np.abs(cycle).max() + 1e-9)


def _envelope(n):
    ramp = max(1, n // 8)
    env = np.ones(n)
    env[:ramp] = np.linspace(0, 1, ramp)
    env[-ramp:] = np.linspace(1, 0, ramp)
    return env


def _keyword_template(seed, word):
    rng = make_rng(seed, "keyword-template", word)
    n_syll = 3
    formants = np.stack([rng.uniform(250, 900, n_syll),
                         rng.uniform(900, 2300, n_syll),
                         rng.uniform(2300, 3500, n_syll)], axis=1)
    return {
        "formants": formants,
        "durations": rng.uniform(0.12, 0.22, size=n_syll),
        "pitch": np.exp(rng.uniform(np.log(100), np.log(280), size=n_syll)),
        "phases": rng.uniform(0, 2 * np.pi, size=(n_syll, 64)),
    }


def _render_keyword(template, rng):
    """One utterance of a fixed template; only onset, gain, a few percent of
    tempo and pitch jitter, and the noise floor vary between renderings."""
    out = np.zeros(KWS_SAMPLES)
    tempo = rng.uniform(0.95, 1.05)
    shift = rng.uniform(0.97, 1.03)
    lengths = [int(d * tempo * SAMPLE_RATE) for d in template["durations"]]
    total = sum(lengths)
    pos = int(rng.integers(0, KWS_SAMPLES - total))
    for n, formants, pitch, phases in zip(lengths, template["formants"], template["pitch"],
                                          template["phases"]):
        out[pos:pos + n] += _voiced(n, pitch * shift, formants, rng, phases=phases) * _envelope(n)
        pos += n
    out *= rng.uniform(0.3, 0.6)
    out += rng.normal(0, 0.01, size=KWS_SAMPLES)
    return np.clip(out, -1, 1)


def _render_phrase(speaker, rng, n=SV_SAMPLES):
    out = np.zeros(n)
    pos = int(rng.integers(0, SAMPLE_RATE // 10))
    while pos < n - SAMPLE_RATE // 10:
        seg = int(rng.uniform(0.12, 0.25) * SAMPLE_RATE)
        seg = min(seg, n - pos)
        vowel = _VOWELS[rng.integers(len(_VOWELS))] * speaker["formant_scale"]
        pitch = speaker["f0"] * rng.uniform(0.95, 1.05)
        out[pos:pos + seg] += _voiced(seg, pitch, vowel, rng, tilt=speaker["tilt"]) * _envelope(seg)
        pos += seg + int(rng.uniform(0.0, 0.06) * SAMPLE_RATE)
    out *= rng.uniform(0.3, 0.6)
    out += rng.normal(0, 0.01, size=n)
    return np.clip(out, -1, 1)


def _speaker_profiles(spec):
    rng = make_rng(spec.seed, "speakers")
    n = spec.n_speakers
    f0 = np.exp(np.linspace(np.log(90), np.log(260), n)) * rng.uniform(0.98, 1.02, size=n)
    scale = np.linspace(0.85, 1.2, n)[rng.permutation(n)]
    tilt = rng.uniform(0.6, 1.6, size=n)
    return [{"f0": f0[i], "formant_scale": scale[i], "tilt": tilt[i]} for i in range(n)]


def keyword_names(n_keywords):
    if n_keywords >= 4:
        return [f"word{i}" for i in range(n_keywords - 2)] + ["unknown", "silence"]
    return [f"word{i}" for i in range(n_keywords)]


def _kws_clip(spec, cls, names, index, split):
    rng = make_rng(spec.seed, "kws", split, cls, index)
    name = names[cls]
    if name == "silence":
        samples = rng.normal(0, rng.uniform(0.005, 0.02), size=KWS_SAMPLES)
    elif name == "unknown":
        word = f"unknown{int(rng.integers(0, 6))}"
        samples = _render_keyword(_keyword_template(spec.seed, word), rng)
    else:
        samples = _render_keyword(_keyword_template(spec.seed, name), rng)
    clip = WavClip(np.clip(samples, -1, 1), SAMPLE_RATE, f"kws/{split}/{name}/{index:04d}")
    return LabeledUtterance(clip, KWS, cls)


def synth_dataset(spec: SynthSpec | None = None) -> SynthCorpus:
    """Deterministic desk-scale stand-in for the KWS and SV corpora.

    Keywords are fixed three-syllable harmonic templates (pitch and formants
    per syllable) rendered with random onset and gain and slight tempo and
    pitch jitter (plus "unknown" words and "silence" noise when
    there are at least four classes). Speakers differ in pitch, formant
    scale and spectral tilt and utter random vowel sequences. Held-out
    speakers, interleaved in pitch order, supply the balanced trial pairs.
    """
    spec = spec or SynthSpec()
    spec.validate()
    names = keyword_names(spec.n_keywords)
    kws_train = [_kws_clip(spec, c, names, i, "train")
                 for c in range(spec.n_keywords) for i in range(spec.clips_per_class)]
    kws_test = [_kws_clip(spec, c, names, i, "test")
                for c in range(spec.n_keywords) for i in range(spec.kws_test_per_class)]

    profiles = _speaker_profiles(spec)
    n = spec.n_speakers
    step = n / spec.heldout_speakers
    heldout = sorted({int(step * (k + 0.5)) for k in range(spec.heldout_speakers)})
    train_spk = [s for s in range(n) if s not in heldout]

    def clips_for(spk):
        out = []
        for i in range(spec.clips_per_class):
            rng = make_rng(spec.seed, "sv", spk, i)
            out.append(WavClip(_render_phrase(profiles[spk], rng), SAMPLE_RATE,
                               f"sv/spk{spk:03d}/{i:04d}"))
        return out

    sv_train = [LabeledUtterance(clip, SV, label)
                for label, spk in enumerate(train_spk) for clip in clips_for(spk)]
    held_clips = {spk: clips_for(spk) for spk in heldout}

    rng = make_rng(spec.seed, "trials")
    trials = []
    n_same = spec.n_pairs // 2
    for k in range(spec.n_pairs):
        if k < n_same:
            spk = heldout[int(rng.integers(len(heldout)))]
            a, b = rng.choice(spec.clips_per_class, size=2, replace=False)
            trials.append(TrialPair(held_clips[spk][a], held_clips[spk][b], True))
        else:
            sa, sb = rng.choice(len(heldout), size=2, replace=False)
            a, b = rng.integers(spec.clips_per_class, size=2)
            trials.append(TrialPair(held_clips[heldout[sa]][a], held_clips[heldout[sb]][b], False))
    return SynthCorpus(kws_train, kws_test, sv_train, trials, names,
                       [f"spk{s:03d}" for s in train_spk], [f"spk{s:03d}" for s in heldout])


# -- on-disk corpora -------------------------------------------------------------------

def load_kws_folder(root, class_names=None):
    """Folder-per-class keyword corpus (``root/<class>/*.wav``).

    With ``class_names`` given, folders outside the list map to a class
    called ``unknown`` if present in the list and are skipped otherwise.
    """
    root = Path(root)
    folders = sorted(p.name for p in root.iterdir() if p.is_dir())
    names = list(class_names) if class_names else folders
    index = {n: i for i, n in enumerate(names)}
    out = []
    for folder in folders:
        label = index.get(folder, index.get("unknown"))
        if label is None:
            continue
        for wav_path in sorted((root / folder).glob("*.wav")):
            out.append(LabeledUtterance(read_wav(wav_path), KWS, label))
    return out, names


def load_speaker_tree(root):
    """``root/<speaker>/<video>/<clip>.wav`` tree; labels follow sorted ids."""
    root = Path(root)
    speakers = sorted(p.name for p in root.iterdir() if p.is_dir())
    out = []
    for label, spk in enumerate(speakers):
        for wav_path in sorted((root / spk).rglob("*.wav")):
            out.append(LabeledUtterance(read_wav(wav_path), SV, label))
    return out, speakers


def read_trial_list(path, audio_root):
    """Lines of ``<0|1> <relative_path_a> <relative_path_b>``."""
    audio_root = Path(audio_root)
    cache = {}
    pairs = []

    def clip(rel):
        if rel not in cache:
            cache[rel] = read_wav(audio_root / rel)
        return cache[rel]

    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected '<0|1> <path_a> <path_b>'")
            pairs.append(TrialPair(clip(parts[1]), clip(parts[2]), parts[0] == "1"))
    return pairs


def write_trial_list(path, pairs, relpath):
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(f"{int(p.same_speaker)} {relpath(p.clip_a)} {relpath(p.clip_b)}\n")


def materialize(corpus: SynthCorpus, out_dir):
    """Write a synthetic corpus as WAV trees plus a trial list."""
    out_dir = Path(out_dir)

    def dump(clip, path):
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(path, clip)

    for split, utts in (("kws_train", corpus.kws_train), ("kws_test", corpus.kws_test)):
        for utt in utts:
            name = corpus.keyword_names[utt.label]
            dump(utt.clip, out_dir / split / name / (utt.clip.source_id.rsplit("/", 1)[-1] + ".wav"))
    for utt in corpus.sv_train:
        spk, idx = utt.clip.source_id.split("/")[1:]
        dump(utt.clip, out_dir / "sv_train" / spk / "synth" / f"{idx}.wav")

    def rel(clip):
        spk, idx = clip.source_id.split("/")[1:]
        return f"{spk}/synth/{idx}.wav"

    seen = set()
    for p in corpus.trials:
        for clip in (p.clip_a, p.clip_b):
            if clip.source_id not in seen:
                seen.add(clip.source_id)
                dump(clip, out_dir / "sv_test" / rel(clip))
    write_trial_list(out_dir / "trials.txt", corpus.trials, rel)
    return out_dir
