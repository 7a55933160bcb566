"""Targeted adversarial-example generation against the toy recognizer.

The generator runs projected sign-gradient descent on a composite loss:
the model's CTC loss toward the target phrase plus a weighted distance
metric between original and perturbed audio. Three scheduling devices
shape the search:

- a sparse sampling mask freezes a random fixed subset of samples, so the
  perturbation only ever touches ``proportion`` of the waveform;
- key-point weighting amplifies, inside the model loss only, the samples
  aligned with the characters still wrong (located via character alignment
  -> emitting frames -> sample intervals), and decays the step size once a
  working example exists;
- an expectation-over-transformation variant averages the model gradient
  over random uniform noise draws to harden the result against that noise.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from advspeech.audio import AudioClip, FrameView, frame_intervals
from advspeech.ctc import (
    DEFAULT_ALPHABET,
    Alphabet,
    beam_search_decode,
    char_frames,
    collapse,
    greedy_decode,
    insertion_gap_frames,
    min_frames_for_target,
    TargetUnreachableError,
)
from advspeech.textdist import DELETE, INSERT, SUBSTITUTE, align_chars, levenshtein

INT16_SCALE = 32768.0

METRIC_KINDS = ("tvd", "linf", "l2", "cosine")
METRIC_DEFAULT_C = {"tvd": 0.001, "linf": 0.01, "l2": 0.001, "cosine": 1.0}


class NonFiniteGradientError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite attack gradient at iteration {iteration}")
        self.iteration = iteration


def metric_tvd(x: np.ndarray, delta: np.ndarray, gamma: float) -> tuple[float, np.ndarray]:
    """Mean squared perturbation plus gamma times the total variation of
    the perturbed signal; returns the value and its subgradient in delta
    (zero at the absolute-value kinks)."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ValueError("x and delta must have equal lengths")
    n = x.size
    z = x + delta
    steps = np.sign(np.diff(z))
    value = float(np.mean(delta * delta) + gamma * np.sum(np.abs(np.diff(z))))
    grad = 2.0 * delta / n
    grad[:-1] -= gamma * steps
    grad[1:] += gamma * steps
    return value, grad


def metric_linf(x: np.ndarray, delta: np.ndarray) -> tuple[float, np.ndarray]:
    """Peak absolute perturbation; subgradient on the first max-magnitude
    sample."""
    delta = np.asarray(delta, dtype=np.float64)
    value = float(np.max(np.abs(delta)))
    grad = np.zeros_like(delta)
    idx = int(np.argmax(np.abs(delta)))
    grad[idx] = np.sign(delta[idx])
    return value, grad


def metric_l2(x: np.ndarray, delta: np.ndarray) -> tuple[float, np.ndarray]:
    delta = np.asarray(delta, dtype=np.float64)
    value = float(np.sqrt(np.sum(delta * delta)))
    grad = delta / value if value > 0 else np.zeros_like(delta)
    return value, grad


def metric_cos(x: np.ndarray, delta: np.ndarray) -> tuple[float, np.ndarray]:
    """One minus the cosine similarity of the original and perturbed
    signals."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    nx = float(np.linalg.norm(x))
    if nx == 0.0:
        raise ValueError("cosine metric needs a nonzero reference signal")
    z = x + delta
    nz = float(np.linalg.norm(z))
    if nz == 0.0:
        return 1.0, np.zeros_like(delta)
    dot = float(np.dot(x, z))
    value = 1.0 - dot / (nx * nz)
    grad = -x / (nx * nz) + dot * z / (nx * nz**3)
    return float(value), grad


def metric_value_and_grad(
    kind: str, x: np.ndarray, delta: np.ndarray, gamma: float
) -> tuple[float, np.ndarray]:
    if kind == "tvd":
        return metric_tvd(x, delta, gamma)
    if kind == "linf":
        return metric_linf(x, delta)
    if kind == "l2":
        return metric_l2(x, delta)
    if kind == "cosine":
        return metric_cos(x, delta)
    raise ValueError(f"unknown metric kind {kind!r}")


def spt_mask(n: int, proportion: float, seed: int) -> np.ndarray:
    """Boolean mask with exactly round(proportion * n) perturbable samples,
    chosen uniformly without replacement; fixed for a whole attack."""
    if not 0.0 < proportion <= 1.0:
        raise ValueError("proportion must lie in (0, 1]")
    m = int(round(proportion * n))
    if m == 0:
        raise ValueError("mask would select zero samples; attack impossible")
    mask = np.zeros(n, dtype=bool)
    rng = np.random.Generator(np.random.PCG64(seed))
    mask[rng.choice(n, size=m, replace=False)] = True
    return mask


def asl_intervals(
    current_text: str,
    target: str,
    path,
    view: FrameView,
    alphabet: Alphabet = DEFAULT_ALPHABET,
) -> list[tuple[int, int]]:
    """Sample intervals responsible for the characters that still differ
    from the target: align current and target text, map each wrong
    character to the frames that emitted it (insertions to their
    neighboring characters' boundary frames), then to sample spans."""
    if collapse(path, alphabet) != current_text:
        raise ValueError("token path does not collapse to current_text")
    if current_text == target:
        return []
    frames: set[int] = set()
    cursor = 0
    for step in align_chars(current_text, target):
        if step.kind == INSERT:
            frames |= insertion_gap_frames(path, cursor)
            continue
        if step.kind in (SUBSTITUTE, DELETE):
            frames |= char_frames(path, (step.i,))
        cursor += 1
    return frame_intervals(view, frames)


@dataclass
class AttackConfig:
    """All attack hyperparameters.

    ``lr0`` is quoted in int16 amplitude units for comparability with
    noise bounds; internally steps are lr0 / 32768 in the normalized
    domain. ``c`` defaults per metric when left as None.
    """

    target: str
    metric_kind: str = "tvd"
    c: float | None = None
    gamma: float = 10.0
    spt_proportion: float = 0.75
    omega: float = 1.2
    lr0: float = 100.0
    beta: float = 0.8
    decay_period: int = 50
    max_iters: int = 500
    decoder: str = "greedy"
    beam_width: int = 8
    wpt_enabled: bool = True
    wpt_levenshtein_threshold: int = 3
    eot_samples: int = 0
    eot_bound: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.spt_proportion <= 1.0:
            raise ValueError("spt_proportion must lie in (0, 1]")
        if self.omega <= 1.0:
            raise ValueError("omega must exceed 1")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.lr0 <= 0.0:
            raise ValueError("lr0 must be positive")
        if self.metric_kind not in METRIC_KINDS:
            raise ValueError(f"metric_kind must be one of {METRIC_KINDS}")
        if self.decoder not in ("greedy", "beam"):
            raise ValueError("decoder must be 'greedy' or 'beam'")
        if self.max_iters < 0 or self.decay_period <= 0:
            raise ValueError("max_iters must be >= 0 and decay_period positive")
        if self.eot_samples < 0 or self.eot_bound < 0:
            raise ValueError("eot_samples and eot_bound must be non-negative")

    def effective_c(self) -> float:
        return METRIC_DEFAULT_C[self.metric_kind] if self.c is None else self.c

    def initial_lr(self) -> float:
        return self.lr0 / INT16_SCALE


@dataclass
class TraceRecord:
    iteration: int
    loss_model: float
    loss_metric: float
    lr: float
    levenshtein: int
    transcription: str

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "loss_model": self.loss_model,
            "loss_metric": self.loss_metric,
            "lr": self.lr,
            "levenshtein": self.levenshtein,
            "transcription": self.transcription,
        }


@dataclass
class AttackState:
    """Evolving attack state: the perturbation, its frozen sparsity mask,
    the current key-point weights, step size, and bookkeeping."""

    delta: np.ndarray
    mask: np.ndarray
    alpha: np.ndarray
    lr: float
    iteration: int = 0
    success_seen: bool = False
    first_success_iteration: int | None = None
    best_delta: np.ndarray | None = None
    best_metric: float = math.inf
    trace: list[TraceRecord] = field(default_factory=list)
    # cached decodes of the current x + delta
    greedy_text: str | None = None
    greedy_path: np.ndarray | None = None
    decoder_text: str | None = None


@dataclass
class CompositeEval:
    total: float
    model_loss: float
    metric_value: float
    grad: np.ndarray


def _eot_noise(n: int, bound: float, seed: int, iteration: int, draw: int) -> np.ndarray:
    seq = np.random.SeedSequence([seed, iteration, draw])
    rng = np.random.Generator(np.random.PCG64(seq))
    return rng.uniform(-bound, bound, size=n)


def composite_loss_and_grad(model, x: AudioClip, state: AttackState, config: AttackConfig) -> CompositeEval:
    """Weighted composite loss and its gradient with respect to delta.

    The key-point weights scale the perturbation inside the model input
    only; the distance metric always sees the unweighted delta. Gradient
    entries outside the sparsity mask are zeroed.
    """
    x_samples = x.samples
    model_input = x_samples + state.alpha * state.delta

    if config.eot_samples > 0:
        model_loss = 0.0
        g_model = np.zeros_like(state.delta)
        for i in range(config.eot_samples):
            if config.eot_bound > 0:
                noise = _eot_noise(len(x), config.eot_bound, config.seed, state.iteration, i)
                noisy = np.clip(model_input + noise, -1.0, 1.0)
            else:
                noisy = model_input
            loss_i, grad_i = model.loss_and_input_grad(noisy, config.target)
            model_loss += loss_i
            g_model += grad_i
        model_loss /= config.eot_samples
        g_model /= config.eot_samples
    else:
        model_loss, g_model = model.loss_and_input_grad(model_input, config.target)

    metric_value, g_metric = metric_value_and_grad(
        config.metric_kind, x_samples, state.delta, config.gamma
    )
    c = config.effective_c()
    grad = state.alpha * g_model + c * g_metric
    grad[~state.mask] = 0.0
    return CompositeEval(
        total=float(model_loss + c * metric_value),
        model_loss=float(model_loss),
        metric_value=float(metric_value),
        grad=grad,
    )


def _decode(model, samples: np.ndarray, config: AttackConfig):
    logits = model.forward_samples(samples)
    greedy_text, path = greedy_decode(logits, model.alphabet)
    if config.decoder == "beam":
        decoder_text = beam_search_decode(logits, config.beam_width, model.alphabet)
    else:
        decoder_text = greedy_text
    return greedy_text, path, decoder_text


def _refresh_decodes(model, x: AudioClip, state: AttackState, config: AttackConfig) -> None:
    state.greedy_text, state.greedy_path, state.decoder_text = _decode(
        model, x.samples + state.delta, config
    )


def _update_alpha(model, x: AudioClip, state: AttackState, config: AttackConfig) -> None:
    """Recompute key-point weights from the current greedy alignment.

    Weighting engages only in the endgame (small remaining edit distance);
    beam-configured attacks still take their intervals from the greedy
    alignment, which is the only single-path alignment available."""
    state.alpha = np.ones_like(state.delta)
    if not config.wpt_enabled:
        return
    current = state.greedy_text
    if current == config.target:
        return
    if levenshtein(current, config.target) > config.wpt_levenshtein_threshold:
        return
    view = model.view_for(len(x))
    intervals = asl_intervals(current, config.target, state.greedy_path, view, model.alphabet)
    for start, stop in intervals:
        state.alpha[start:stop] = config.omega


def _evaluate_and_record(model, x: AudioClip, state: AttackState, config: AttackConfig) -> CompositeEval:
    if state.greedy_text is None:
        _refresh_decodes(model, x, state, config)
    _update_alpha(model, x, state, config)
    ev = composite_loss_and_grad(model, x, state, config)
    state.trace.append(
        TraceRecord(
            iteration=state.iteration,
            loss_model=ev.model_loss,
            loss_metric=ev.metric_value,
            lr=state.lr,
            levenshtein=levenshtein(state.decoder_text, config.target),
            transcription=state.decoder_text,
        )
    )
    return ev


def _check_success(state: AttackState, config: AttackConfig, x: AudioClip) -> None:
    if state.decoder_text != config.target:
        return
    metric_value = metric_value_and_grad(
        config.metric_kind, x.samples, state.delta, config.gamma
    )[0]
    if not state.success_seen:
        state.success_seen = True
        state.first_success_iteration = state.iteration
    if metric_value < state.best_metric:
        state.best_metric = metric_value
        state.best_delta = state.delta.copy()


def attack_step(model, x: AudioClip, state: AttackState, config: AttackConfig) -> AttackState:
    """One sign-gradient update: evaluate the composite loss at the current
    perturbation (recomputing key-point weights from the current decode),
    step every masked sample by lr against the gradient sign, project so
    the perturbed signal stays in [-1, 1], then re-decode and track
    successes (best = smallest metric value among successful iterates)."""
    ev = _evaluate_and_record(model, x, state, config)
    if not np.all(np.isfinite(ev.grad)):
        raise NonFiniteGradientError(state.iteration + 1)
    state.delta = state.delta - state.lr * np.sign(ev.grad)
    state.delta = np.clip(x.samples + state.delta, -1.0, 1.0) - x.samples
    state.iteration += 1
    _refresh_decodes(model, x, state, config)
    _check_success(state, config, x)
    return state


def db_peak(v: np.ndarray) -> float:
    peak = float(np.max(np.abs(v)))
    return -math.inf if peak == 0.0 else 20.0 * math.log10(peak)


def dbx_delta(x: np.ndarray, delta: np.ndarray) -> float:
    """Peak-ratio distortion measure dB(x) - dB(delta); +inf for a silent
    delta."""
    return db_peak(np.asarray(x)) - db_peak(np.asarray(delta))


@dataclass
class AttackResult:
    success: bool
    adversarial: AudioClip
    delta: np.ndarray
    target: str
    final_transcription: str
    iterations_to_first_success: int | None
    iterations_run: int
    snr_db: float
    dbx_delta: float
    metric_value: float
    wall_time_s: float
    trace: list[TraceRecord]
    config: AttackConfig


def _snr_db_samples(x: np.ndarray, delta: np.ndarray) -> float:
    p_x = float(np.mean(np.square(x)))
    p_d = float(np.mean(np.square(delta)))
    if p_d == 0.0:
        return math.inf
    return 10.0 * math.log10(p_x / p_d)


def _build_result(model, x: AudioClip, state: AttackState, config: AttackConfig, started: float) -> AttackResult:
    if state.success_seen:
        delta = state.best_delta
        metric_value = state.best_metric
    else:
        delta = state.delta
        metric_value = metric_value_and_grad(config.metric_kind, x.samples, delta, config.gamma)[0]
    adv_samples = np.clip(x.samples + delta, -1.0, 1.0)
    adversarial = x.with_samples(adv_samples)
    _, _, final_text = _decode(model, adv_samples, config)
    return AttackResult(
        success=state.success_seen,
        adversarial=adversarial,
        delta=delta.copy(),
        target=config.target,
        final_transcription=final_text,
        iterations_to_first_success=state.first_success_iteration,
        iterations_run=state.iteration,
        snr_db=_snr_db_samples(x.samples, delta),
        dbx_delta=dbx_delta(x.samples, delta),
        metric_value=float(metric_value),
        wall_time_s=time.perf_counter() - started,
        trace=state.trace,
        config=config,
    )


def run_attack(model, x: AudioClip, config: AttackConfig) -> AttackResult:
    """Full attack loop.

    Starts from a zero perturbation, checks the target is reachable within
    the clip's frame budget, then iterates ``attack_step`` to max_iters.
    After the first success the loop keeps refining and the learning rate
    decays by beta every decay_period iterations (key-point weighting and
    the decay are both part of the weighting scheme and disabled
    together). The returned perturbation is the successful iterate with
    the smallest metric value, or the last iterate when nothing succeeded.
    """
    config.validate()
    started = time.perf_counter()
    view = model.view_for(len(x))
    need = min_frames_for_target(config.target, model.alphabet)
    if view.frame_count < need:
        raise TargetUnreachableError(
            f"target {config.target!r} needs {need} frames, clip provides {view.frame_count}"
        )

    n = len(x)
    state = AttackState(
        delta=np.zeros(n),
        mask=spt_mask(n, config.spt_proportion, config.seed),
        alpha=np.ones(n),
        lr=config.initial_lr(),
    )
    _refresh_decodes(model, x, state, config)
    _check_success(state, config, x)
    if state.success_seen:
        # already transcribed as the target: nothing to perturb
        state.trace.append(
            TraceRecord(
                iteration=0,
                loss_model=model.loss_and_input_grad(x.samples, config.target)[0],
                loss_metric=metric_value_and_grad(config.metric_kind, x.samples, state.delta, config.gamma)[0],
                lr=state.lr,
                levenshtein=0,
                transcription=state.decoder_text,
            )
        )
        return _build_result(model, x, state, config, started)

    for k in range(1, config.max_iters + 1):
        attack_step(model, x, state, config)
        if config.wpt_enabled and state.success_seen and state.iteration % config.decay_period == 0:
            state.lr *= config.beta

    _evaluate_and_record(model, x, state, config)  # trace entry for the final state
    return _build_result(model, x, state, config, started)


def run_attack_eot(model, x: AudioClip, config: AttackConfig) -> AttackResult:
    """Attack with the model gradient averaged over uniform-noise draws of
    the perturbed input; with a zero noise bound the trajectory reduces to
    the plain attack."""
    if config.eot_samples < 1:
        raise ValueError("run_attack_eot needs eot_samples >= 1")
    return run_attack(model, x, config)


def clone_config(config: AttackConfig, **overrides) -> AttackConfig:
    return replace(config, **overrides)
