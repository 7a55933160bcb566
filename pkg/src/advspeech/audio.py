"""Audio clips, 16-bit PCM WAV I/O, framing, and signal-level metrics.

All in-memory audio lives in the normalized float domain [-1, 1]; the int16
quantization boundary is confined to :func:`read_wav` / :func:`write_wav`.
Noise bounds and learning rates quoted in int16 units elsewhere in the
package are converted with the same 1/32768 scale used here.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

INT16_SCALE = 32768.0


class WavError(Exception):
    """Base class for WAV parsing and encoding failures."""


class MalformedWavError(WavError):
    """File is not a well-formed RIFF/WAVE container."""


class UnsupportedWavError(WavError):
    """File is valid RIFF/WAVE but not 16-bit mono PCM."""


class EmptyWavDataError(WavError):
    """The data chunk holds no samples."""


@dataclass(frozen=True)
class AudioClip:
    """A mono audio signal: normalized samples plus a sample rate in Hz.

    ``samples`` is a float64 vector with every value in [-1, 1]. Operations
    in this package treat clips as immutable values.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("samples must be a non-empty 1-D vector")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if np.max(np.abs(samples)) > 1.0:
            raise ValueError("samples must lie in [-1.0, 1.0]")

    def __len__(self) -> int:
        return int(self.samples.size)

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        """New clip with the same rate and different samples."""
        return AudioClip(samples=samples, sample_rate=self.sample_rate)


@dataclass(frozen=True)
class FrameView:
    """Fixed-length framing of a signal: frame i covers samples
    [i*hop, i*hop + frame_length).

    With hop == frame_length the frames partition the covered prefix of the
    signal, which keeps the frame -> sample interval map one-to-one.
    """

    frame_length: int
    hop: int
    num_samples: int
    frame_count: int = field(init=False)

    def __post_init__(self) -> None:
        if self.frame_length <= 0 or self.hop <= 0:
            raise ValueError("frame_length and hop must be positive")
        if self.num_samples < self.frame_length:
            count = 0
        else:
            count = (self.num_samples - self.frame_length) // self.hop + 1
        object.__setattr__(self, "frame_count", count)

    def frame_span(self, index: int) -> tuple[int, int]:
        """Half-open sample interval [start, stop) covered by frame ``index``."""
        if not 0 <= index < self.frame_count:
            raise IndexError(f"frame index {index} out of range [0, {self.frame_count})")
        start = index * self.hop
        return start, start + self.frame_length


def read_wav(path) -> AudioClip:
    """Read a 16-bit mono PCM RIFF/WAVE file.

    Samples are int16 values divided by 32768. Chunks other than ``fmt ``
    and ``data`` are skipped, so extra chunks before ``data`` are tolerated.

    Raises MalformedWavError for broken containers, UnsupportedWavError for
    non-PCM / non-mono / non-16-bit encodings, EmptyWavDataError for an
    empty data chunk.
    """
    with open(path, "rb") as fh:
        raw = fh.read()

    if len(raw) < 12:
        raise MalformedWavError("file too short for a RIFF header")
    if raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError("missing RIFF/WAVE magic")

    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(raw):
        chunk_id = raw[offset:offset + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, offset + 4)
        body = raw[offset + 8:offset + 8 + chunk_size]
        if len(body) < chunk_size:
            raise MalformedWavError(f"chunk {chunk_id!r} truncated")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
            break
        # chunks are word-aligned: odd sizes carry a pad byte
        offset += 8 + chunk_size + (chunk_size & 1)

    if fmt is None:
        raise MalformedWavError("no fmt chunk")
    if data is None:
        raise MalformedWavError("no data chunk")
    if len(fmt) < 16:
        raise MalformedWavError("fmt chunk too short")

    audio_format, channels, sample_rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if audio_format != 1:
        raise UnsupportedWavError(f"compressed or non-PCM encoding (format tag {audio_format})")
    if channels != 1:
        raise UnsupportedWavError(f"expected mono, got {channels} channels")
    if bits != 16:
        raise UnsupportedWavError(f"expected 16-bit samples, got {bits}-bit")
    if len(data) == 0:
        raise EmptyWavDataError("data chunk holds no samples")
    if len(data) % 2 != 0:
        raise MalformedWavError("data chunk length is not a multiple of the sample size")

    ints = np.frombuffer(data, dtype="<i2")
    return AudioClip(samples=ints.astype(np.float64) / INT16_SCALE, sample_rate=int(sample_rate))


def write_wav(clip: AudioClip, path) -> None:
    """Write a clip as a canonical 44-byte-header 16-bit mono PCM WAV file.

    Quantization is round(s * 32768) clamped to [-32768, 32767]: the exact
    inverse of the read scale, so a read/write round trip reproduces the
    original data chunk byte for byte (1.0 saturates to 32767).
    """
    ints = np.round(clip.samples * INT16_SCALE)
    ints = np.clip(ints, -32768, 32767).astype("<i2")
    data = ints.tobytes()

    sample_rate = clip.sample_rate
    byte_rate = sample_rate * 2
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, byte_rate, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def snr_db(x: AudioClip, delta: AudioClip) -> float:
    """Signal-to-noise ratio 10*log10(P_x / P_delta) in dB, with P the mean
    squared amplitude (length-independent, ratio-identical to total energy
    for equal lengths).

    Returns +inf for a zero-energy delta; raises for zero-energy x.
    """
    if len(x) != len(delta):
        raise ValueError("x and delta must have equal lengths")
    p_x = float(np.mean(np.square(x.samples)))
    p_d = float(np.mean(np.square(delta.samples)))
    if p_x == 0.0:
        raise ValueError("zero-energy reference signal")
    if p_d == 0.0:
        return math.inf
    return 10.0 * math.log10(p_x / p_d)


def add_uniform_noise(x: AudioClip, bound: float, seed: int) -> AudioClip:
    """Add i.i.d. uniform noise on [-bound, +bound] and clamp to [-1, 1].

    ``bound`` is in normalized amplitude units; a noise level quoted as an
    int16 excursion D corresponds to bound = D / 32768. Deterministic in
    (x, bound, seed).
    """
    if bound < 0:
        raise ValueError("noise bound must be non-negative")
    if bound == 0:
        return x
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.uniform(-bound, bound, size=len(x))
    return x.with_samples(np.clip(x.samples + noise, -1.0, 1.0))


def frame_intervals(view: FrameView, frame_indices) -> list[tuple[int, int]]:
    """Merged half-open sample intervals covered by the given frames.

    Returns a sorted list of disjoint (start, stop) pairs; adjacent or
    overlapping frame spans are merged.
    """
    indices = sorted(set(int(i) for i in frame_indices))
    if not indices:
        return []
    if indices[0] < 0 or indices[-1] >= view.frame_count:
        raise IndexError(f"frame indices must lie in [0, {view.frame_count})")

    merged: list[tuple[int, int]] = []
    for i in indices:
        start, stop = view.frame_span(i)
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], stop))
        else:
            merged.append((start, stop))
    return merged
