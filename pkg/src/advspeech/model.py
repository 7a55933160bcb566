"""A tiny white-box recurrent CTC recognizer over raw audio frames, its
training loop, and the synthetic tone-coded corpus it learns.

The recognizer is a single-layer tanh recurrent network reading raw
(unwindowed) frames, so the loss is differentiable end to end down to
individual audio samples via plain backpropagation through time. The
corpus renders each character as a fixed dual-sine tone, which makes the
task reliably learnable at desk scale; experiments on top of the model
then measure the attack, not the recognizer.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from advspeech.audio import AudioClip, FrameView, write_wav, read_wav
from advspeech.ctc import (
    DEFAULT_ALPHABET,
    Alphabet,
    beam_search_decode,
    ctc_grad_logits,
    ctc_loss,
    greedy_decode,
)
from advspeech.textdist import levenshtein

SAMPLE_RATE = 16000
FRAMES_PER_CHAR = 6
SILENCE_FRAMES = 2
TONE_AMPLITUDE = 0.3
TONE_NOISE_AMPLITUDE = 0.01

# transcripts for synthetic utterances are sampled from this pool
DEFAULT_WORDS = tuple(
    sorted(
        {
            "all", "and", "appeared", "ash", "asked", "below", "boy", "but",
            "circular", "could", "darkness", "down", "edge", "falling",
            "figure", "finally", "for", "four", "from", "grey", "had", "her",
            "him", "hundreds", "ignore", "known", "married", "merchant",
            "money", "need", "other", "peace", "people", "place", "refugees",
            "safe", "said", "seemed", "shear", "sheep", "shepherds",
            "sleeping", "some", "teach", "the", "this", "thought", "time",
            "told", "tranquil", "tribal", "wars", "was", "waste", "were",
            "who", "you",
            "audio", "door", "echo", "front", "hello", "listen", "noise",
            "now", "okay", "open", "phone", "restart", "sound", "speak",
            "voice", "world",
        }
    )
)


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


def tone_frequencies(char: str, alphabet: Alphabet = DEFAULT_ALPHABET) -> tuple[float, float]:
    """Dual-sine codebook entry for one character."""
    (idx,) = alphabet.encode(char)
    return 400.0 + 35.0 * idx, 1200.0 + 20.0 * idx


def synth_utterance(
    text: str,
    seed: int,
    frame_length: int = 160,
    alphabet: Alphabet = DEFAULT_ALPHABET,
) -> AudioClip:
    """Render a transcript as tone-coded audio at 16 kHz.

    Each character becomes FRAMES_PER_CHAR frames of its two codebook
    sines (total amplitude TONE_AMPLITUDE), characters are separated by
    SILENCE_FRAMES silent frames, and a small uniform dither is added over
    the whole clip. Deterministic in (text, seed).
    """
    if not text:
        raise ValueError("cannot synthesize an empty transcript")
    if len(text) > 32:
        raise ValueError("transcripts longer than 32 characters are not supported")
    alphabet.encode(text)  # validate characters up front

    char_len = FRAMES_PER_CHAR * frame_length
    gap_len = SILENCE_FRAMES * frame_length
    pieces = []
    for k, ch in enumerate(text):
        if k > 0:
            pieces.append(np.zeros(gap_len))
        f1, f2 = tone_frequencies(ch, alphabet)
        n = np.arange(char_len)
        half = TONE_AMPLITUDE / 2.0
        pieces.append(
            half * np.sin(2.0 * np.pi * f1 * n / SAMPLE_RATE)
            + half * np.sin(2.0 * np.pi * f2 * n / SAMPLE_RATE)
        )
    samples = np.concatenate(pieces)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(text.encode())])))
    samples = samples + rng.uniform(-TONE_NOISE_AMPLITUDE, TONE_NOISE_AMPLITUDE, size=samples.size)
    return AudioClip(samples=samples, sample_rate=SAMPLE_RATE)


@dataclass
class Corpus:
    """Synthetic (clip, transcript) pairs plus the seed that generated them."""

    items: list[tuple[AudioClip, str]]
    seed: int
    codebook: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)


def make_corpus(
    n_utterances: int = 200,
    length_range: tuple[int, int] = (3, 8),
    seed: int = 0,
    words=DEFAULT_WORDS,
    alphabet: Alphabet = DEFAULT_ALPHABET,
) -> Corpus:
    """Sample transcripts from the word pool (filtered to the length range)
    and synthesize their clips. Deterministic in all arguments."""
    lo, hi = length_range
    pool = [w for w in words if lo <= len(w) <= hi]
    if not pool:
        raise ValueError(f"no words of length {lo}..{hi} in the pool")
    rng = np.random.Generator(np.random.PCG64(seed))
    items = []
    for k in range(n_utterances):
        text = pool[int(rng.integers(len(pool)))]
        items.append((synth_utterance(text, seed=seed + 7919 * (k + 1), alphabet=alphabet), text))
    codebook = {c: tone_frequencies(c, alphabet) for c in alphabet.tokens[1:]}
    return Corpus(items=items, seed=seed, codebook=codebook)


def save_corpus(corpus_items, out_dir) -> str:
    """Write items as WAV files plus a `<wav-path>\\t<transcript>` manifest;
    returns the manifest path. Paths in the manifest are relative to it."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    lines = []
    for k, (clip, text) in enumerate(corpus_items):
        name = f"utt_{k:04d}.wav"
        write_wav(clip, os.path.join(out_dir, name))
        lines.append(f"{name}\t{text}\n")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    return manifest_path


def load_corpus(manifest_path) -> list[tuple[AudioClip, str]]:
    import os

    base = os.path.dirname(os.path.abspath(manifest_path))
    items = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            path, sep, text = line.partition("\t")
            if not sep:
                raise ValueError(f"manifest line without a tab separator: {line!r}")
            items.append((read_wav(os.path.join(base, path)), text))
    return items


@dataclass
class ToyCtcModel:
    """Single-layer tanh recurrent recognizer over raw frames.

    Per frame: h_t = tanh(frame_t @ W_in + h_{t-1} @ W_rec + b), h_0 = 0,
    logits_t = h_t @ W_out + b_out. Forward and gradients are pure
    functions of the (immutable) parameters.
    """

    frame_length: int
    hop: int
    W_in: np.ndarray   # (frame_length, H)
    W_rec: np.ndarray  # (H, H)
    b: np.ndarray      # (H,)
    W_out: np.ndarray  # (H, V)
    b_out: np.ndarray  # (V,)
    alphabet: Alphabet = DEFAULT_ALPHABET

    @property
    def hidden_size(self) -> int:
        return self.b.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.b_out.shape[0]

    def view_for(self, n_samples: int) -> FrameView:
        return FrameView(frame_length=self.frame_length, hop=self.hop, num_samples=n_samples)

    def _frames(self, samples: np.ndarray) -> np.ndarray:
        view = self.view_for(samples.size)
        if view.frame_count < 1:
            raise ValueError("clip shorter than one frame")
        windows = np.lib.stride_tricks.sliding_window_view(samples, self.frame_length)
        return windows[:: self.hop][: view.frame_count]

    def _forward_states(self, samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        frames = self._frames(samples)
        proj = frames @ self.W_in + self.b
        T = frames.shape[0]
        h = np.empty((T, self.hidden_size))
        prev = np.zeros(self.hidden_size)
        for t in range(T):
            prev = np.tanh(proj[t] + prev @ self.W_rec)
            h[t] = prev
        logits = h @ self.W_out + self.b_out
        return frames, h, logits

    def forward(self, clip: AudioClip) -> np.ndarray:
        """Logits matrix with one row per frame."""
        return self.forward_samples(clip.samples)

    def forward_samples(self, samples: np.ndarray) -> np.ndarray:
        """Forward pass on a raw sample vector."""
        _, _, logits = self._forward_states(np.asarray(samples, dtype=np.float64))
        return logits

    def transcribe(self, clip: AudioClip, decoder: str = "greedy", beam_width: int = 8) -> str:
        logits = self.forward(clip)
        if decoder == "greedy":
            text, _ = greedy_decode(logits, self.alphabet)
            return text
        if decoder == "beam":
            return beam_search_decode(logits, beam_width, self.alphabet)
        raise ValueError(f"unknown decoder {decoder!r}")

    def _backward(
        self,
        frames: np.ndarray,
        h: np.ndarray,
        d_logits: np.ndarray,
        want_params: bool,
        want_input: bool,
    ):
        T = frames.shape[0]
        dh_direct = d_logits @ self.W_out.T
        da = np.empty_like(h)
        carry = np.zeros(self.hidden_size)
        for t in range(T - 1, -1, -1):
            da[t] = (dh_direct[t] + carry) * (1.0 - h[t] * h[t])
            carry = da[t] @ self.W_rec.T

        grads = None
        if want_params:
            h_prev = np.vstack([np.zeros((1, self.hidden_size)), h[:-1]])
            grads = {
                "W_in": frames.T @ da,
                "W_rec": h_prev.T @ da,
                "b": da.sum(axis=0),
                "W_out": h.T @ d_logits,
                "b_out": d_logits.sum(axis=0),
            }

        dx = None
        if want_input:
            d_frames = da @ self.W_in.T
            n = (T - 1) * self.hop + self.frame_length
            dx = np.zeros(n)
            if self.hop == self.frame_length:
                dx[: T * self.frame_length] = d_frames.ravel()
            else:
                for t in range(T):
                    start = t * self.hop
                    dx[start : start + self.frame_length] += d_frames[t]
        return grads, dx

    def loss_and_input_grad(self, samples: np.ndarray, target: str) -> tuple[float, np.ndarray]:
        """CTC loss toward ``target`` and its exact gradient with respect to
        every raw sample. Samples past the last full frame never enter the
        forward pass, so their gradient is exactly zero."""
        samples = np.asarray(samples, dtype=np.float64)
        frames, h, logits = self._forward_states(samples)
        loss = ctc_loss(logits, target, self.alphabet)
        d_logits = ctc_grad_logits(logits, target, self.alphabet)
        _, dx = self._backward(frames, h, d_logits, want_params=False, want_input=True)
        full = np.zeros(samples.size)
        full[: dx.size] = dx
        return loss, full

    def loss_and_param_grads(self, samples: np.ndarray, target: str) -> tuple[float, dict]:
        samples = np.asarray(samples, dtype=np.float64)
        frames, h, logits = self._forward_states(samples)
        loss = ctc_loss(logits, target, self.alphabet)
        d_logits = ctc_grad_logits(logits, target, self.alphabet)
        grads, _ = self._backward(frames, h, d_logits, want_params=True, want_input=False)
        return loss, grads

    def grad_wrt_input(self, clip: AudioClip, target: str) -> np.ndarray:
        _, dx = self.loss_and_input_grad(np.asarray(clip.samples, dtype=np.float64), target)
        return dx

    def copy(self) -> "ToyCtcModel":
        return ToyCtcModel(
            frame_length=self.frame_length,
            hop=self.hop,
            W_in=self.W_in.copy(),
            W_rec=self.W_rec.copy(),
            b=self.b.copy(),
            W_out=self.W_out.copy(),
            b_out=self.b_out.copy(),
            alphabet=self.alphabet,
        )


def new_model(
    frame_length: int = 160,
    hop: int = 160,
    hidden_size: int = 64,
    seed: int = 0,
    alphabet: Alphabet = DEFAULT_ALPHABET,
) -> ToyCtcModel:
    """Fresh model with all parameters drawn uniform(-0.08, 0.08)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    V = len(alphabet)

    def init(*shape):
        return rng.uniform(-0.08, 0.08, size=shape)

    return ToyCtcModel(
        frame_length=frame_length,
        hop=hop,
        W_in=init(frame_length, hidden_size),
        W_rec=init(hidden_size, hidden_size),
        b=init(hidden_size),
        W_out=init(hidden_size, V),
        b_out=init(V),
        alphabet=alphabet,
    )


_PARAM_ORDER = ("W_in", "W_rec", "b", "W_out", "b_out")


def _clip_global_norm(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


@dataclass
class TrainingReport:
    epoch_losses: list[float]
    holdout_cer: float
    n_train: int
    n_holdout: int
    epochs: int
    lr: float
    batch_size: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "epoch_losses": self.epoch_losses,
            "holdout_cer": self.holdout_cer,
            "n_train": self.n_train,
            "n_holdout": self.n_holdout,
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }


def character_error_rate(model: ToyCtcModel, items) -> float:
    """Total greedy edit distance over total reference characters."""
    edits = 0
    chars = 0
    for clip, text in items:
        decoded = model.transcribe(clip, decoder="greedy")
        edits += levenshtein(decoded, text)
        chars += len(text)
    return edits / chars if chars else 0.0


def train(
    model: ToyCtcModel,
    corpus: Corpus | list,
    epochs: int = 200,
    lr: float = 0.12,
    seed: int = 0,
    batch_size: int = 8,
    grad_clip: float = 5.0,
    holdout_fraction: float = 0.1,
) -> tuple[ToyCtcModel, TrainingReport]:
    """Minibatch stochastic gradient descent on the mean CTC loss.

    The last ``holdout_fraction`` of the corpus is held out; the report
    carries the per-epoch mean training loss and the final greedy
    character error rate on the held-out split. Bit-reproducible given
    (model, corpus, seed).
    """
    items = corpus.items if isinstance(corpus, Corpus) else list(corpus)
    if not items:
        raise ValueError("corpus is empty")
    n_holdout = int(round(holdout_fraction * len(items)))
    n_holdout = min(max(n_holdout, 0), len(items) - 1)
    train_items = items[: len(items) - n_holdout]
    holdout_items = items[len(items) - n_holdout :]

    model = model.copy()
    params = {name: getattr(model, name) for name in _PARAM_ORDER}
    rng = np.random.Generator(np.random.PCG64(seed))
    epoch_losses: list[float] = []

    for epoch in range(epochs):
        order = rng.permutation(len(train_items))
        total_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            acc = {name: np.zeros_like(p) for name, p in params.items()}
            batch_loss = 0.0
            for idx in batch:
                clip, text = train_items[int(idx)]
                loss, grads = model.loss_and_param_grads(clip.samples, text)
                batch_loss += loss
                for name in _PARAM_ORDER:
                    acc[name] += grads[name]
            scale = 1.0 / len(batch)
            mean_grads = {name: g * scale for name, g in acc.items()}
            mean_grads = _clip_global_norm(mean_grads, grad_clip)
            for name in _PARAM_ORDER:
                params[name] -= lr * mean_grads[name]
            total_loss += batch_loss
        epoch_mean = total_loss / len(train_items)
        if not np.isfinite(epoch_mean):
            raise TrainingDivergedError(epoch)
        epoch_losses.append(float(epoch_mean))

    cer = character_error_rate(model, holdout_items) if holdout_items else 0.0
    report = TrainingReport(
        epoch_losses=epoch_losses,
        holdout_cer=float(cer),
        n_train=len(train_items),
        n_holdout=len(holdout_items),
        epochs=epochs,
        lr=lr,
        batch_size=batch_size,
        seed=seed,
    )
    return model, report


_CKPT_MAGIC = b"ADVSPCTC"
_CKPT_VERSION = 1


def save_model(model: ToyCtcModel, path) -> None:
    """Checkpoint layout: magic, version, then (frame_length, hop, H, V) as
    little-endian uint32, then W_in, W_rec, b, W_out, b_out as row-major
    little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(
            struct.pack(
                "<IIII", model.frame_length, model.hop, model.hidden_size, model.n_tokens
            )
        )
        for name in _PARAM_ORDER:
            fh.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_model(path, alphabet: Alphabet = DEFAULT_ALPHABET) -> ToyCtcModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise ValueError("not a model checkpoint")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    frame_length, hop, H, V = struct.unpack_from("<IIII", blob, 12)
    if V != len(alphabet):
        raise ValueError(f"checkpoint token count {V} does not match alphabet size {len(alphabet)}")
    shapes = {
        "W_in": (frame_length, H),
        "W_rec": (H, H),
        "b": (H,),
        "W_out": (H, V),
        "b_out": (V,),
    }
    offset = 28
    arrays = {}
    for name in _PARAM_ORDER:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[name] = arr.reshape(shapes[name]).astype(np.float64)
        offset += count * 8
    if offset != len(blob):
        raise ValueError("checkpoint size mismatch")
    return ToyCtcModel(frame_length=frame_length, hop=hop, alphabet=alphabet, **arrays)
