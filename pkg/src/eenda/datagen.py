"""Synthetic multi-domain mixture generation and log-mel feature extraction.

Each domain is described by a :class:`DomainSpec` (speaker-count range,
overlap target, noise colour/SNR, pause statistics).  Speakers are rendered
as harmonic-plus-noise bursts with speaker-specific pitch and band, placed
on a timeline with exponential pauses and controlled overlap, then mixed
with domain-coloured noise at the requested SNR.  Everything is
deterministic given the spec and an explicit seed.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_SAMPLE_RATE = 8000

NOISE_PROFILES = ("white", "pink", "brown", "blue", "hum")


@dataclass(frozen=True)
class DomainSpec:
    """Static description of one synthetic domain."""

    name: str
    speaker_count_range: tuple[int, int] = (1, 4)
    overlap_ratio: float = 0.2
    noise_profile: str = "white"
    noise_snr_db: float = 10.0
    pause_scale: float = 1.0
    seed_namespace: int = 0
    band_hz: tuple[float, float] | None = None  # channel band-pass (e.g. telephone)

    def __post_init__(self):
        lo, hi = self.speaker_count_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad speaker_count_range {self.speaker_count_range}")
        if not 0.0 <= self.overlap_ratio <= 1.0:
            raise ValueError(f"overlap_ratio must be in [0,1], got {self.overlap_ratio}")
        if self.noise_profile not in NOISE_PROFILES:
            raise ValueError(
                f"unknown noise_profile {self.noise_profile!r}; choose from {NOISE_PROFILES}")
        if self.band_hz is not None:
            b_lo, b_hi = self.band_hz
            if not 0.0 <= b_lo < b_hi:
                raise ValueError(f"band_hz must satisfy 0 <= lo < hi, got {self.band_hz}")


@dataclass
class Mixture:
    """One simulated recording with its ground-truth segments."""

    waveform: np.ndarray
    sample_rate: int
    segments: list[tuple[int, float, float]]  # (speaker_id, start_s, end_s)
    domain: str

    @property
    def duration_s(self) -> float:
        return len(self.waveform) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    num_mels: int = 23
    window_s: float = 0.025
    hop_s: float = 0.01
    log_floor: float = 1e-10


@dataclass
class FrameFeatures:
    values: np.ndarray  # (T, F)
    hop_s: float
    window_s: float

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class SpeakerActivityMatrix:
    values: np.ndarray  # (T, S); {0,1} labels or [0,1] posteriors
    speakers: list = field(default_factory=list)

    @property
    def num_speakers(self) -> int:
        return self.values.shape[1]


def _mixture_rng(spec: DomainSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed_namespace, seed & 0xFFFFFFFF])


def _speaker_voices(rng: np.random.Generator, num_speakers: int) -> list[dict]:
    voices = []
    for _ in range(num_speakers):
        voices.append({
            "f0": rng.uniform(90.0, 260.0),
            "band_lo": (lo := rng.uniform(200.0, 1200.0)),
            "band_hi": lo + rng.uniform(400.0, 1800.0),
            "noise_mix": rng.uniform(0.2, 0.5),
        })
    return voices


def _bandpass_noise(rng: np.random.Generator, n: int, sr: int, lo: float, hi: float) -> np.ndarray:
    x = rng.standard_normal(n)
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n)


def _synth_utterance(rng: np.random.Generator, voice: dict, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = voice["f0"] * (1.0 + 0.02 * np.sin(2 * np.pi * 3.1 * t))
    phase = np.cumsum(2 * np.pi * f0 / sr)
    harm = np.zeros(n)
    for k in range(1, 6):
        harm += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
    noise = _bandpass_noise(rng, n, sr, voice["band_lo"], voice["band_hi"])
    x = (1 - voice["noise_mix"]) * harm + voice["noise_mix"] * noise
    # syllabic amplitude modulation plus short fades
    x *= 0.6 + 0.4 * np.abs(np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t))
    fade = min(n // 2, int(0.01 * sr))
    if fade > 0:
        ramp = np.linspace(0.0, 1.0, fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    rms = np.sqrt(np.mean(x**2))
    return x * (0.1 / max(rms, 1e-12))


def colored_noise(rng: np.random.Generator, n: int, sr: int, profile: str) -> np.ndarray:
    """Unit-RMS noise with the given spectral shape."""
    if profile == "hum":
        t = np.arange(n) / sr
        x = np.zeros(n)
        for k, amp in ((1, 1.0), (2, 0.5), (3, 0.25)):
            x += amp * np.sin(2 * np.pi * 50.0 * k * t + rng.uniform(0, 2 * np.pi))
        x += 0.1 * rng.standard_normal(n)
    else:
        exponent = {"white": 0.0, "pink": -0.5, "brown": -1.0, "blue": 0.5}[profile]
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        scale = np.ones_like(freqs)
        nz = freqs > 0
        scale[nz] = (freqs[nz] / freqs[nz].min()) ** exponent
        scale[0] = 0.0
        x = np.fft.irfft(spec * scale, n)
    return x / max(np.sqrt(np.mean(x**2)), 1e-12)


def _schedule_segments(
    rng: np.random.Generator,
    spec: DomainSpec,
    num_speakers: int,
    duration_s: float,
) -> list[tuple[int, float, float]]:
    r = spec.overlap_ratio
    can_overlap = num_speakers > 1 and r > 0
    order = list(rng.permutation(num_speakers))
    segments: list[tuple[int, float, float]] = []
    prev_end = 0.0
    prev_len = 0.0
    prev_spk = -1
    while prev_end < duration_s:
        length = rng.uniform(1.0, 3.0)
        spk = order.pop(0) if order else int(rng.integers(num_speakers))
        # servo on the realized fraction so it tracks the target tightly
        if segments and can_overlap and overlap_fraction(segments) < r:
            ov = rng.uniform(0.3, 0.9) * min(length, prev_len)
            start = max(0.0, prev_end - ov)
            if spk == prev_spk:
                spk = (spk + 1) % num_speakers
        else:
            start = prev_end + 0.02 + rng.exponential(spec.pause_scale)
        end = min(start + length, duration_s)
        if end - start >= 0.2:
            segments.append((int(spk), start, end))
            prev_len = end - start
            prev_spk = spk
        prev_end = max(prev_end, end, start)

    # guarantee every requested speaker appears at least once
    present = {s for s, _, _ in segments}
    for spk in range(num_speakers):
        if spk in present:
            continue
        length = min(1.0, duration_s)
        if r == 0.0:
            slot = _largest_gap_slot(segments, duration_s, length)
            if slot is None:
                continue
            start, end = slot
        else:
            start = rng.uniform(0.0, max(duration_s - length, 0.0))
            end = min(start + length, duration_s)
        segments.append((spk, start, end))
    segments.sort(key=lambda seg: (seg[1], seg[0]))
    return segments


def _largest_gap_slot(segments, duration_s: float, length: float):
    events = sorted((s, e) for _, s, e in segments)
    gaps = []
    cursor = 0.0
    for s, e in events:
        if s > cursor:
            gaps.append((cursor, s))
        cursor = max(cursor, e)
    if cursor < duration_s:
        gaps.append((cursor, duration_s))
    if not gaps:
        return None
    lo, hi = max(gaps, key=lambda g: g[1] - g[0])
    lo, hi = lo + 0.01, hi - 0.01
    if hi - lo < 0.05:
        return None
    return lo, min(lo + length, hi)


def simulate_mixture(
    spec: DomainSpec,
    num_speakers: int,
    duration_s: float,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Mixture:
    """Deterministically simulate one multi-speaker mixture for a domain."""
    lo, hi = spec.speaker_count_range
    if not lo <= num_speakers <= hi:
        raise ValueError(
            f"num_speakers={num_speakers} outside {spec.name} range [{lo},{hi}]")
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")

    rng = _mixture_rng(spec, seed)
    voices = _speaker_voices(rng, num_speakers)
    segments = _schedule_segments(rng, spec, num_speakers, duration_s)

    n = int(round(duration_s * sample_rate))
    wav = np.zeros(n)
    speech_mask = np.zeros(n, dtype=bool)
    for spk, start, end in segments:
        i0, i1 = int(round(start * sample_rate)), int(round(end * sample_rate))
        i1 = min(i1, n)
        if i1 <= i0:
            continue
        wav[i0:i1] += _synth_utterance(rng, voices[spk], i1 - i0, sample_rate)
        speech_mask[i0:i1] = True

    if speech_mask.any():
        p_speech = float(np.mean(wav[speech_mask] ** 2))
        noise = colored_noise(rng, n, sample_rate, spec.noise_profile)
        noise *= np.sqrt(p_speech / 10 ** (spec.noise_snr_db / 10))
        wav += noise

    if spec.band_hz is not None:
        # channel band-limiting applied to the whole recording chain
        lo_hz, hi_hz = spec.band_hz
        sp = np.fft.rfft(wav)
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        sp[(freqs < lo_hz) | (freqs > hi_hz)] = 0.0
        wav = np.fft.irfft(sp, n)

    peak = np.max(np.abs(wav))
    if peak > 0.99:
        wav *= 0.99 / peak
    return Mixture(wav.astype(np.float32), sample_rate, segments, spec.name)


def overlap_fraction(segments: list[tuple[int, float, float]]) -> float:
    """Fraction of speech time where at least two speakers are active."""
    events = []
    for _, s, e in segments:
        events.append((s, 1))
        events.append((e, -1))
    events.sort()
    active = 0
    speech = 0.0
    overlapped = 0.0
    prev_t = None
    for t, d in events:
        if prev_t is not None and active > 0:
            speech += t - prev_t
            if active > 1:
                overlapped += t - prev_t
        active += d
        prev_t = t
    return overlapped / speech if speech > 0 else 0.0


def mel_filterbank(num_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filterbank over rFFT bins, 0 Hz to Nyquist."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    nyquist = sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), num_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((num_mels, len(bins)))
    for m in range(num_mels):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bins - left) / max(center - left, 1e-9)
        down = (right - bins) / max(right - center, 1e-9)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def extract_logmel(
    waveform: np.ndarray,
    sample_rate: int,
    config: FeatureConfig = FeatureConfig(),
) -> FrameFeatures:
    """Log mel-filterbank features; natural log of (mel energy + log_floor)."""
    if len(waveform) == 0:
        raise ValueError("empty waveform")
    if sample_rate < 8000:
        raise ValueError("sample_rate must be >= 8 kHz")
    win = int(round(config.window_s * sample_rate))
    hop = int(round(config.hop_s * sample_rate))
    if len(waveform) < win:
        raise ValueError("waveform shorter than one analysis window")
    num_frames = 1 + (len(waveform) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(num_frames)[:, None]
    frames = waveform[idx] * np.hanning(win)[None, :]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = mel_filterbank(config.num_mels, win, sample_rate)
    logmel = np.log(power @ fb.T + config.log_floor)
    return FrameFeatures(logmel.astype(np.float32), config.hop_s, config.window_s)


def frames_to_labels(
    segments: list[tuple[object, float, float]],
    hop_s: float,
    num_frames: int,
    max_speakers: int,
) -> SpeakerActivityMatrix:
    """Binary frame activity from segments; frame t is centred at t*hop_s.

    If more than max_speakers distinct speakers occur, the ones with the
    most total speech are kept (ties broken by lower speaker id).
    """
    if num_frames <= 0:
        raise ValueError("num_frames must be positive")
    totals: dict = {}
    for spk, s, e in segments:
        totals[spk] = totals.get(spk, 0.0) + (e - s)
    speakers = sorted(totals)
    if len(speakers) > max_speakers:
        ranked = sorted(speakers, key=lambda sp: (-totals[sp], sp))
        speakers = sorted(ranked[:max_speakers])
    col = {spk: j for j, spk in enumerate(speakers)}
    labels = np.zeros((num_frames, len(speakers)), dtype=np.float32)
    centers = np.arange(num_frames) * hop_s
    for spk, s, e in segments:
        if spk not in col:
            continue
        labels[(centers >= s) & (centers < e), col[spk]] = 1.0
    return SpeakerActivityMatrix(labels, speakers)


def crop_sample(
    features: FrameFeatures,
    labels: SpeakerActivityMatrix,
    crop_frames: int,
    seed: int,
) -> tuple[FrameFeatures, SpeakerActivityMatrix]:
    """Aligned contiguous random crop; silent speakers are dropped."""
    total = features.num_frames
    if crop_frames > total:
        raise ValueError(f"crop_frames={crop_frames} exceeds T={total}")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, total - crop_frames + 1))
    vals = features.values[start:start + crop_frames]
    lab = labels.values[start:start + crop_frames]
    keep = lab.sum(axis=0) > 0
    cropped = SpeakerActivityMatrix(
        lab[:, keep], [s for s, k in zip(labels.speakers, keep) if k])
    return FrameFeatures(vals, features.hop_s, features.window_s), cropped


# ---------------------------------------------------------------------------
# corpus generation

def write_wav(path: Path, waveform: np.ndarray, sample_rate: int) -> None:
    """16-bit PCM mono RIFF/WAVE."""
    pcm = np.clip(waveform, -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0, sr


def generate_corpus(
    specs: list[DomainSpec],
    mixtures_per_domain: int,
    duration_s: float,
    out_dir: Path,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Path:
    """Write waveforms, reference RTTMs and a JSONL manifest; returns its path.

    Manifest record: {"id", "wav", "rttm", "domain", "duration_s",
    "num_speakers"} with paths relative to out_dir.
    """
    from .scoring import RttmSegment, write_rttm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "wav").mkdir(exist_ok=True)
    (out_dir / "rttm").mkdir(exist_ok=True)
    records = []
    for spec in specs:
        rng = np.random.default_rng([seed, spec.seed_namespace])
        for i in range(mixtures_per_domain):
            lo, hi = spec.speaker_count_range
            n_spk = int(rng.integers(lo, hi + 1))
            mix_seed = int(rng.integers(0, 2**31 - 1))
            mix = simulate_mixture(spec, n_spk, duration_s, mix_seed, sample_rate)
            file_id = f"{spec.name}_{i:04d}"
            wav_rel = f"wav/{file_id}.wav"
            rttm_rel = f"rttm/{file_id}.rttm"
            write_wav(out_dir / wav_rel, mix.waveform, sample_rate)
            ref = [
                RttmSegment(file_id, s, e - s, f"spk{spk}")
                for spk, s, e in mix.segments
            ]
            (out_dir / rttm_rel).write_text(write_rttm(ref))
            records.append({
                "id": file_id,
                "wav": wav_rel,
                "rttm": rttm_rel,
                "domain": spec.name,
                "duration_s": duration_s,
                "num_speakers": n_spk,
            })
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest


def load_manifest(path: Path) -> list[dict]:
    entries = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries
