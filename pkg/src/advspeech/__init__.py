"""Audio adversarial example toolkit.

A small, self-contained stack for studying targeted attacks on speech
recognizers at desk scale:

- ``audio``: clip representation, 16-bit PCM WAV I/O, framing, SNR, noise.
- ``textdist``: Levenshtein distance, character alignment, word error rate.
- ``ctc``: CTC loss with exact gradients, greedy and prefix beam decoding,
  plus brute-force path-enumeration oracles.
- ``model``: a tiny differentiable recurrent CTC recognizer trained on a
  synthetic tone-coded corpus.
- ``attack``: the targeted sign-gradient attack with sparse sampling masks,
  key-point weighting, learning-rate decay, four distance metrics, and an
  expectation-over-transformation variant.
- ``harness``: batch experiment drivers (success rate, robustness to noise,
  metric comparison, convergence speed) with CSV/JSON reports.
- ``cli``: the ``advspeech`` command (gen-corpus / train / attack / bench).
"""

from advspeech.audio import AudioClip, FrameView, add_uniform_noise, read_wav, snr_db, write_wav
from advspeech.ctc import (
    Alphabet,
    DEFAULT_ALPHABET,
    beam_search_decode,
    collapse,
    ctc_grad_logits,
    ctc_loss,
    greedy_decode,
    prob_phrase_bruteforce,
)
from advspeech.model import Corpus, ToyCtcModel, load_model, make_corpus, save_model, synth_utterance, train
from advspeech.attack import AttackConfig, AttackResult, run_attack, run_attack_eot
from advspeech.textdist import EditBreakdown, align_chars, levenshtein, wer

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "FrameView",
    "read_wav",
    "write_wav",
    "snr_db",
    "add_uniform_noise",
    "EditBreakdown",
    "levenshtein",
    "align_chars",
    "wer",
    "Alphabet",
    "DEFAULT_ALPHABET",
    "collapse",
    "prob_phrase_bruteforce",
    "ctc_loss",
    "ctc_grad_logits",
    "greedy_decode",
    "beam_search_decode",
    "ToyCtcModel",
    "Corpus",
    "synth_utterance",
    "make_corpus",
    "train",
    "save_model",
    "load_model",
    "AttackConfig",
    "AttackResult",
    "run_attack",
    "run_attack_eot",
    "__version__",
]
