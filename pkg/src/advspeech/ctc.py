"""CTC machinery: alphabet, path collapse, exact loss and gradients,
greedy and prefix beam decoding, and brute-force enumeration oracles.

The loss and gradient run the forward-backward recursions entirely in log
space (logaddexp), so they stay finite for the sharply peaked logits the
attack produces. The enumeration routines are deliberately independent of
the forward-backward code path: they sum over every raw token path and act
as ground truth for the analytic implementations at guard sizes.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

BLANK = 0

BRUTEFORCE_MAX_FRAMES = 8
BRUTEFORCE_MAX_TOKENS = 6


class TargetUnreachableError(ValueError):
    """Target needs more frames than the logits provide."""


@dataclass(frozen=True)
class Alphabet:
    """Ordered token set with the blank token '-' fixed at index 0.

    Text characters are every token except the blank; encode/decode are
    inverse bijections on strings over those characters.
    """

    tokens: str
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.tokens) < 2:
            raise ValueError("alphabet needs the blank plus at least one character")
        if self.tokens[BLANK] != "-":
            raise ValueError("token 0 must be the blank '-'")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("alphabet tokens must be distinct")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        out = []
        for ch in text:
            idx = self._index.get(ch)
            if idx is None or idx == BLANK:
                raise ValueError(f"character {ch!r} is not encodable")
            out.append(idx)
        return out

    def decode(self, indices) -> str:
        chars = []
        for i in indices:
            if not 0 < i < len(self.tokens):
                raise ValueError(f"index {i} is not a character token")
            chars.append(self.tokens[i])
        return "".join(chars)


DEFAULT_ALPHABET = Alphabet("-abcdefghijklmnopqrstuvwxyz ")


def collapse(path, alphabet: Alphabet = DEFAULT_ALPHABET) -> str:
    """Collapse a token path: merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != BLANK:
            out.append(alphabet.tokens[tok])
        prev = tok
    return "".join(out)


def min_frames_for_target(target: str, alphabet: Alphabet = DEFAULT_ALPHABET) -> int:
    """Fewest frames any token path collapsing to ``target`` can have:
    one per character plus a separating blank per adjacent repeat."""
    labels = alphabet.encode(target)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _extended_labels(target: str, alphabet: Alphabet):
    labels = alphabet.encode(target)
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    # skip transition s-2 -> s exists only into a fresh non-blank label
    skip_ok = np.zeros(len(ext), dtype=bool)
    skip_ok[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ext, skip_ok


def _forward(log_y: np.ndarray, ext: np.ndarray, skip_ok: np.ndarray) -> np.ndarray:
    T = log_y.shape[0]
    S = ext.shape[0]
    neg = -np.inf
    emit = log_y[:, ext]  # (T, S)
    alpha = np.full((T, S), neg)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        move = np.full(S, neg)
        move[1:] = prev[:-1]
        skip = np.full(S, neg)
        skip[2:] = prev[:-2]
        skip[~skip_ok] = neg
        alpha[t] = emit[t] + np.logaddexp(np.logaddexp(prev, move), skip)
    return alpha


def _backward(log_y: np.ndarray, ext: np.ndarray, skip_ok: np.ndarray) -> np.ndarray:
    T = log_y.shape[0]
    S = ext.shape[0]
    neg = -np.inf
    emit = log_y[:, ext]
    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        move = np.full(S, neg)
        move[:-1] = nxt[1:]
        skip = np.full(S, neg)
        skip[:-2] = np.where(skip_ok[2:], nxt[2:], neg)
        beta[t] = np.logaddexp(np.logaddexp(nxt, move), skip)
    return beta


def _loss_from_alpha(alpha: np.ndarray) -> float:
    S = alpha.shape[1]
    final = alpha[-1, S - 1]
    if S > 1:
        final = np.logaddexp(final, alpha[-1, S - 2])
    return float(-final)


def _check_reachable(target: str, n_frames: int, alphabet: Alphabet) -> None:
    need = min_frames_for_target(target, alphabet)
    if n_frames < need:
        raise TargetUnreachableError(
            f"target {target!r} needs at least {need} frames, logits have {n_frames}"
        )


def ctc_loss(logits: np.ndarray, target: str, alphabet: Alphabet = DEFAULT_ALPHABET) -> float:
    """-log Pr(target | softmax(logits)) via the forward recursion over the
    blank-interleaved target.

    Raises TargetUnreachableError when no length-T path can collapse to the
    target, and ValueError for characters outside the alphabet.
    """
    logits = np.asarray(logits, dtype=np.float64)
    _check_reachable(target, logits.shape[0], alphabet)
    ext, skip_ok = _extended_labels(target, alphabet)
    alpha = _forward(_log_softmax(logits), ext, skip_ok)
    return _loss_from_alpha(alpha)


def ctc_grad_logits(
    logits: np.ndarray, target: str, alphabet: Alphabet = DEFAULT_ALPHABET
) -> np.ndarray:
    """Exact gradient of ``ctc_loss`` with respect to the logits.

    Equals softmax(logits) minus the forward-backward token posterior, so
    every row sums to zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    _check_reachable(target, logits.shape[0], alphabet)
    T, V = logits.shape
    ext, skip_ok = _extended_labels(target, alphabet)
    log_y = _log_softmax(logits)
    alpha = _forward(log_y, ext, skip_ok)
    beta = _backward(log_y, ext, skip_ok)
    log_p = -_loss_from_alpha(alpha)

    occupancy = np.exp(alpha + beta - log_p)  # (T, S) state posteriors
    gamma = np.zeros((T, V))
    for t in range(T):
        gamma[t] = np.bincount(ext, weights=occupancy[t], minlength=V)
    return np.exp(log_y) - gamma


def greedy_decode(
    logits: np.ndarray, alphabet: Alphabet = DEFAULT_ALPHABET
) -> tuple[str, np.ndarray]:
    """Per-frame argmax path (ties to the lowest token index, hence blank on
    all-equal rows) and its collapsed text. The path is returned so callers
    can map output characters back to frames."""
    logits = np.asarray(logits, dtype=np.float64)
    path = np.argmax(logits, axis=1)
    return collapse(path, alphabet), path


def beam_search_scored(
    logits: np.ndarray, beam_width: int, alphabet: Alphabet = DEFAULT_ALPHABET
) -> tuple[str, float]:
    """Prefix beam search merging token paths by collapsed prefix.

    Returns the best prefix and its log path-mass. With a beam wide enough
    to hold every reachable prefix the search is exhaustive and the scores
    are the exact per-phrase probabilities.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    log_y = _log_softmax(logits)
    T, V = log_y.shape
    neg = -np.inf
    # prefix -> [log mass of paths ending in blank, ending in last char]
    beams: dict[tuple, list[float]] = {(): [0.0, neg]}
    for t in range(T):
        row = log_y[t]
        grown: dict[tuple, list[float]] = {}

        def accumulate(prefix, slot, value):
            entry = grown.get(prefix)
            if entry is None:
                grown[prefix] = entry = [neg, neg]
            entry[slot] = np.logaddexp(entry[slot], value)

        for prefix, (p_blank, p_char) in beams.items():
            total = np.logaddexp(p_blank, p_char)
            accumulate(prefix, 0, row[BLANK] + total)
            last = prefix[-1] if prefix else -1
            for k in range(1, V):
                if k == last:
                    # same char again extends the run; a fresh copy of the
                    # char needs the path to have passed through a blank
                    accumulate(prefix, 1, row[k] + p_char)
                    accumulate(prefix + (k,), 1, row[k] + p_blank)
                else:
                    accumulate(prefix + (k,), 1, row[k] + total)

        ranked = sorted(
            grown.items(),
            key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]),
        )
        beams = dict(ranked[:beam_width])

    best_prefix, (p_blank, p_char) = min(
        beams.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0])
    )
    return alphabet.decode(best_prefix), float(np.logaddexp(p_blank, p_char))


def beam_search_decode(
    logits: np.ndarray, beam_width: int, alphabet: Alphabet = DEFAULT_ALPHABET
) -> str:
    text, _ = beam_search_scored(logits, beam_width, alphabet)
    return text


def _char_runs(path) -> list[tuple[int, int]]:
    """Inclusive (first, last) frame index of each collapsed-output
    character, in output order."""
    runs: list[tuple[int, int]] = []
    prev = None
    for t, tok in enumerate(path):
        tok = int(tok)
        if tok != BLANK and tok != prev:
            runs.append((t, t))
        elif tok != BLANK and tok == prev:
            runs[-1] = (runs[-1][0], t)
        prev = tok
    return runs


def char_frames(path, char_positions) -> set[int]:
    """Frames that emitted the given collapsed-output character positions:
    the maximal run of each character's token instance."""
    runs = _char_runs(path)
    frames: set[int] = set()
    for pos in char_positions:
        if not 0 <= pos < len(runs):
            raise IndexError(f"character position {pos} out of range [0, {len(runs)})")
        first, last = runs[pos]
        frames.update(range(first, last + 1))
    return frames


def insertion_gap_frames(path, gap_position: int) -> set[int]:
    """Frames attributed to a character missing from the path that belongs
    before collapsed-output position ``gap_position``.

    The attribution spans from the last frame of the left neighboring
    character through the first frame of the right one, including the
    separating blank frames. Edge gaps use the clip boundary as the missing
    neighbor; a path with no characters at all maps to every frame.
    """
    runs = _char_runs(path)
    n_frames = len(path)
    if not 0 <= gap_position <= len(runs):
        raise IndexError(f"gap position {gap_position} out of range [0, {len(runs)}]")
    if not runs:
        return set(range(n_frames))
    start = runs[gap_position - 1][1] if gap_position > 0 else 0
    stop = runs[gap_position][0] if gap_position < len(runs) else n_frames - 1
    return set(range(start, stop + 1))


def _validate_probabilities(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("probability matrix must be 2-D (frames x tokens)")
    T, V = y.shape
    if T > BRUTEFORCE_MAX_FRAMES or V > BRUTEFORCE_MAX_TOKENS:
        raise ValueError(
            f"enumeration guard: need T <= {BRUTEFORCE_MAX_FRAMES} and "
            f"V <= {BRUTEFORCE_MAX_TOKENS}, got {T}x{V}"
        )
    if np.any(y < 0) or not np.allclose(y.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("rows must be probability distributions")
    return y


def prob_phrase_bruteforce(
    y: np.ndarray, p: str, alphabet: Alphabet = DEFAULT_ALPHABET
) -> float:
    """Exact Pr(p | y) by enumerating every token path and summing the
    probability of those whose collapse equals ``p``.

    Guarded to tiny instances; this is the oracle the analytic CTC loss is
    checked against, so it shares no code with the forward recursion.
    """
    y = _validate_probabilities(y)
    T, V = y.shape
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path, alphabet) == p:
            prob = 1.0
            for t, tok in enumerate(path):
                prob *= y[t, tok]
            total += prob
    return total


def collapse_distribution(
    y: np.ndarray, alphabet: Alphabet = DEFAULT_ALPHABET
) -> dict[str, float]:
    """Probability of every collapsed phrase under ``y``, by enumeration.

    The values partition the path space, so they sum to 1. The argmax of
    this map is the brute-force ideal a decoder is judged against.
    """
    y = _validate_probabilities(y)
    T, V = y.shape
    dist: dict[str, float] = {}
    for path in itertools.product(range(V), repeat=T):
        prob = 1.0
        for t, tok in enumerate(path):
            prob *= y[t, tok]
        text = collapse(path, alphabet)
        dist[text] = dist.get(text, 0.0) + prob
    return dist


_LOGITS_MAGIC = b"LGTS"


def logits_to_bytes(logits: np.ndarray) -> bytes:
    """Diagnostic serialization: magic, (T, V) as little-endian uint32, then
    row-major little-endian float64 values."""
    logits = np.ascontiguousarray(logits, dtype="<f8")
    T, V = logits.shape
    return _LOGITS_MAGIC + struct.pack("<II", T, V) + logits.tobytes()


def logits_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != _LOGITS_MAGIC:
        raise ValueError("not a serialized logits blob")
    T, V = struct.unpack_from("<II", blob, 4)
    body = np.frombuffer(blob, dtype="<f8", offset=12)
    if body.size != T * V:
        raise ValueError("logits blob size mismatch")
    return body.reshape(T, V).astype(np.float64)
