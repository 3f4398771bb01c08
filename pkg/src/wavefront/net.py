"""Classifier head and training machinery.

A unidirectional LSTM (hidden 60) reads the feature frames, an additive
attention block (FC-50 -> FC-1 -> softmax over time) pools them into one
vector, and a dense layer produces the label logits. All gradients are
hand-derived, including backprop through time; the optimizer is SGD with
classic momentum at batch size 1. Also here: run configuration, frontend
dispatch, checkpoint serialization, and the finite-difference gradient
check registry.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LABELS, Manifest, Utterance, pad_or_trim, read_wav, uar
from .dsp import Waveform, preemphasis
from .errors import ConfigError, NumericError
from .melfb import (
    FeatureMap,
    MelConfig,
    MelFilterbankMatrix,
    log_mel_features,
    mean_variance_normalize,
    mel_energy_features,
    mel_filterbank_matrix,
)
from .pcen import PcenParams, init_pcen_params, pcen_backward, pcen_forward
from .tdfb import TdfbParams, init_tdfb_params, tdfb_backward, tdfb_forward

FRONTENDS = ("mel", "mel_mvn", "mel_pcen", "tdfb", "tdfb_pcen")
PCEN_FRONTENDS = ("mel_pcen", "tdfb_pcen")
PCEN_PARAM_NAMES = ("r", "alpha", "delta")


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or evaluation run depends on."""

    frontend: str
    pcen_learn: tuple[str, ...] = ()
    seed: int = 0
    epochs: int = 20
    patience: int = 10
    learning_rate: float = 0.001
    momentum: float = 0.98
    n_filters: int = 64
    sample_rate: int = 16000
    clip_seconds: float = 2.5
    win_len: int = 400
    hop: int = 160
    n_fft: int = 512
    hidden_size: int = 60
    attn_size: int = 50
    n_labels: int = 2
    preemphasis_coeff: float = 0.97


def make_run_config(frontend: str, pcen_learn=None, **kwargs) -> RunConfig:
    """Build and validate a RunConfig; pcen_learn defaults to all three
    parameters for PCEN frontends and must be absent otherwise."""
    if frontend not in FRONTENDS:
        raise ConfigError(
            f"unknown frontend '{frontend}' (choose from {', '.join(FRONTENDS)})"
        )
    if frontend in PCEN_FRONTENDS:
        if pcen_learn is None:
            pcen_learn = PCEN_PARAM_NAMES
        bad = [p for p in pcen_learn if p not in PCEN_PARAM_NAMES]
        if bad:
            raise ConfigError(f"unknown PCEN parameters: {', '.join(bad)}")
        pcen_learn = tuple(p for p in PCEN_PARAM_NAMES if p in pcen_learn)
    else:
        if pcen_learn:
            raise ConfigError(
                f"--pcen-learn is only valid with PCEN frontends, not '{frontend}'"
            )
        pcen_learn = ()
    cfg = RunConfig(frontend=frontend, pcen_learn=pcen_learn, **kwargs)
    if cfg.epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if cfg.patience < 1:
        raise ConfigError("patience must be >= 1")
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d["pcen_learn"] = list(cfg.pcen_learn)
    return d


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    d["pcen_learn"] = tuple(d.get("pcen_learn", ()))
    return RunConfig(**d)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Model parameters

MODEL_TENSOR_NAMES = (
    "lstm.wx",
    "lstm.wh",
    "lstm.b",
    "attn1.w",
    "attn1.b",
    "attn2.w",
    "attn2.b",
    "out.w",
    "out.b",
)


@dataclass
class ModelParams:
    """LSTM + attention + output layer weights. Gate rows of the stacked
    LSTM matrices are ordered input, forget, cell, output."""

    lstm_wx: np.ndarray  # (4H, D)
    lstm_wh: np.ndarray  # (4H, H)
    lstm_b: np.ndarray  # (4H,)
    attn1_w: np.ndarray  # (A, H)
    attn1_b: np.ndarray  # (A,)
    attn2_w: np.ndarray  # (A,)
    attn2_b: np.ndarray  # (1,)
    out_w: np.ndarray  # (n_labels, H)
    out_b: np.ndarray  # (n_labels,)

    @property
    def hidden_size(self) -> int:
        return self.lstm_wh.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "lstm.wx": self.lstm_wx,
            "lstm.wh": self.lstm_wh,
            "lstm.b": self.lstm_b,
            "attn1.w": self.attn1_w,
            "attn1.b": self.attn1_b,
            "attn2.w": self.attn2_w,
            "attn2.b": self.attn2_b,
            "out.w": self.out_w,
            "out.b": self.out_b,
        }


def _uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


def init_model_params(
    rng: np.random.Generator, n_inputs: int, hidden: int, attn: int, n_labels: int
) -> ModelParams:
    h4 = 4 * hidden
    b = np.zeros(h4)
    b[hidden : 2 * hidden] = 1.0  # forget-gate bias starts open
    return ModelParams(
        lstm_wx=_uniform(rng, (h4, n_inputs), n_inputs, h4),
        lstm_wh=_uniform(rng, (h4, hidden), hidden, h4),
        lstm_b=b,
        attn1_w=_uniform(rng, (attn, hidden), hidden, attn),
        attn1_b=np.zeros(attn),
        attn2_w=_uniform(rng, (attn,), attn, 1),
        attn2_b=np.zeros(1),
        out_w=_uniform(rng, (n_labels, hidden), hidden, n_labels),
        out_b=np.zeros(n_labels),
    )


# ---------------------------------------------------------------------------
# LSTM


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmCache:
    x: np.ndarray
    gates_i: np.ndarray
    gates_f: np.ndarray
    gates_g: np.ndarray
    gates_o: np.ndarray
    cells: np.ndarray
    tanh_cells: np.ndarray
    hidden: np.ndarray


def lstm_forward(x: np.ndarray, p: ModelParams) -> tuple[np.ndarray, LstmCache]:
    """Standard LSTM over (n_frames, n_inputs) with h0 = c0 = 0; returns the
    hidden sequence (n_frames, hidden)."""
    n_frames = x.shape[0]
    h = p.hidden_size
    pre = x @ p.lstm_wx.T + p.lstm_b  # input contribution for every step
    gi = np.empty((n_frames, h))
    gf = np.empty((n_frames, h))
    gg = np.empty((n_frames, h))
    go = np.empty((n_frames, h))
    cells = np.empty((n_frames, h))
    tanh_cells = np.empty((n_frames, h))
    hidden = np.empty((n_frames, h))
    h_prev = np.zeros(h)
    c_prev = np.zeros(h)
    for t in range(n_frames):
        z = pre[t] + p.lstm_wh @ h_prev
        gi[t] = _sigmoid(z[:h])
        gf[t] = _sigmoid(z[h : 2 * h])
        gg[t] = np.tanh(z[2 * h : 3 * h])
        go[t] = _sigmoid(z[3 * h :])
        c_prev = gf[t] * c_prev + gi[t] * gg[t]
        cells[t] = c_prev
        tanh_cells[t] = np.tanh(c_prev)
        h_prev = go[t] * tanh_cells[t]
        hidden[t] = h_prev
        if not np.all(np.isfinite(h_prev)):
            raise NumericError(f"non-finite LSTM state at timestep {t}")
    return hidden, LstmCache(x, gi, gf, gg, go, cells, tanh_cells, hidden)


def lstm_backward(
    grad_hidden: np.ndarray, cache: LstmCache, p: ModelParams
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backprop through time; returns LSTM weight gradients and grad w.r.t.
    the input sequence."""
    n_frames, h = cache.hidden.shape
    dz_all = np.empty((n_frames, 4 * h))
    dh_next = np.zeros(h)
    dc_next = np.zeros(h)
    for t in range(n_frames - 1, -1, -1):
        dh = grad_hidden[t] + dh_next
        tc = cache.tanh_cells[t]
        do = dh * tc
        dc = dc_next + dh * cache.gates_o[t] * (1.0 - tc * tc)
        c_prev = cache.cells[t - 1] if t > 0 else np.zeros(h)
        di = dc * cache.gates_g[t]
        dg = dc * cache.gates_i[t]
        df = dc * c_prev
        dc_next = dc * cache.gates_f[t]
        gi, gf, gg, go = (
            cache.gates_i[t],
            cache.gates_f[t],
            cache.gates_g[t],
            cache.gates_o[t],
        )
        dz = dz_all[t]
        dz[:h] = di * gi * (1.0 - gi)
        dz[h : 2 * h] = df * gf * (1.0 - gf)
        dz[2 * h : 3 * h] = dg * (1.0 - gg * gg)
        dz[3 * h :] = do * go * (1.0 - go)
        dh_next = p.lstm_wh.T @ dz
    h_prev_seq = np.vstack([np.zeros((1, h)), cache.hidden[:-1]])
    grads = {
        "lstm.wx": dz_all.T @ cache.x,
        "lstm.wh": dz_all.T @ h_prev_seq,
        "lstm.b": dz_all.sum(axis=0),
    }
    grad_x = dz_all @ p.lstm_wx
    return grads, grad_x


# ---------------------------------------------------------------------------
# Attention pooling and output layer


@dataclass
class AttentionCache:
    hidden: np.ndarray
    scored: np.ndarray  # tanh(fc1(h_t))
    weights: np.ndarray
    context: np.ndarray


def attention_forward(
    hidden: np.ndarray, p: ModelParams
) -> tuple[np.ndarray, np.ndarray, AttentionCache]:
    """Score each hidden state (FC -> tanh -> FC-1), softmax the scores over
    time, and classify the weighted combination of hidden states.

    Returns (logits, attention weights, cache).
    """
    scored = np.tanh(hidden @ p.attn1_w.T + p.attn1_b)
    scores = scored @ p.attn2_w + p.attn2_b[0]
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    weights = exp / exp.sum()
    context = weights @ hidden
    logits = p.out_w @ context + p.out_b
    return logits, weights, AttentionCache(hidden, scored, weights, context)


def attention_backward(
    grad_logits: np.ndarray, cache: AttentionCache, p: ModelParams
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Returns attention/output weight gradients and grad w.r.t. the hidden
    sequence."""
    a = cache.weights
    grads = {
        "out.w": np.outer(grad_logits, cache.context),
        "out.b": grad_logits.copy(),
    }
    dcontext = p.out_w.T @ grad_logits
    da = cache.hidden @ dcontext
    grad_hidden = np.outer(a, dcontext)
    dscores = a * (da - a @ da)  # softmax backward
    grads["attn2.w"] = cache.scored.T @ dscores
    grads["attn2.b"] = np.array([dscores.sum()])
    dscored = np.outer(dscores, p.attn2_w) * (1.0 - cache.scored**2)
    grads["attn1.w"] = dscored.T @ cache.hidden
    grads["attn1.b"] = dscored.sum(axis=0)
    grad_hidden += dscored @ p.attn1_w
    return grads, grad_hidden


def cross_entropy_loss(
    logits: np.ndarray, label: int
) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy with max-subtraction; returns loss and
    grad w.r.t. the logits (softmax - onehot)."""
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} logits")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    log_probs = shifted - log_z
    grad = np.exp(log_probs)
    grad[label] -= 1.0
    return float(-log_probs[label]), grad


def classifier_forward(features: np.ndarray, p: ModelParams):
    """Features are (channels, frames); the LSTM consumes them frame-major."""
    x = np.ascontiguousarray(features.T)
    hidden, lstm_cache = lstm_forward(x, p)
    logits, weights, attn_cache = attention_forward(hidden, p)
    return logits, weights, (lstm_cache, attn_cache)


def classifier_backward(grad_logits, caches, p: ModelParams):
    lstm_cache, attn_cache = caches
    grads, grad_hidden = attention_backward(grad_logits, attn_cache, p)
    lstm_grads, grad_x = lstm_backward(grad_hidden, lstm_cache, p)
    grads.update(lstm_grads)
    return grads, grad_x.T  # back to (channels, frames)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    velocities: dict[str, np.ndarray]
    momentum: float = 0.98
    learning_rate: float = 0.001


def init_optimizer(
    tensors: dict[str, np.ndarray], momentum: float, learning_rate: float
) -> OptimizerState:
    return OptimizerState(
        velocities={k: np.zeros_like(v) for k, v in tensors.items()},
        momentum=momentum,
        learning_rate=learning_rate,
    )


def sgd_momentum_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> None:
    """Classic momentum, applied in place: v <- mu v + g, theta <- theta - lr v."""
    for name, vel in state.velocities.items():
        if name not in grads:
            raise ValueError(f"missing gradient for tensor '{name}'")
        g = grads[name]
        if g.shape != vel.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor "
                f"'{name}' shape {vel.shape}"
            )
        vel *= state.momentum
        vel += g
        tensors[name] -= state.learning_rate * vel


# ---------------------------------------------------------------------------
# Frontend dispatch


@dataclass
class Frontend:
    kind: str
    mel_config: MelConfig
    mel_matrix: MelFilterbankMatrix
    tdfb: TdfbParams | None = None
    pcen: PcenParams | None = None


def build_frontend(cfg: RunConfig) -> Frontend:
    mel_config = MelConfig(
        n_filters=cfg.n_filters,
        win_len=cfg.win_len,
        hop=cfg.hop,
        n_fft=cfg.n_fft,
        sample_rate=cfg.sample_rate,
        f_min=0.0,
        f_max=cfg.sample_rate / 2.0,
    )
    matrix = mel_filterbank_matrix(
        cfg.n_filters, cfg.n_fft, cfg.sample_rate, 0.0, cfg.sample_rate / 2.0
    )
    fe = Frontend(cfg.frontend, mel_config, matrix)
    if cfg.frontend in ("tdfb", "tdfb_pcen"):
        # When PCEN follows, it replaces the log compression entirely.
        fe.tdfb = init_tdfb_params(
            matrix,
            kernel_width=cfg.win_len,
            lowpass_width=cfg.win_len,
            lowpass_stride=cfg.hop,
            apply_log=(cfg.frontend == "tdfb"),
        )
    if cfg.frontend in PCEN_FRONTENDS:
        fe.pcen = init_pcen_params(cfg.n_filters, learn=cfg.pcen_learn)
    return fe


def frontend_forward(fe: Frontend, wave: Waveform):
    """Returns (values (channels, frames), cache for frontend_backward)."""
    if fe.kind == "mel":
        return log_mel_features(wave, fe.mel_config, fe.mel_matrix).values, None
    if fe.kind == "mel_mvn":
        fm = log_mel_features(wave, fe.mel_config, fe.mel_matrix)
        return mean_variance_normalize(fm).values, None
    if fe.kind == "mel_pcen":
        energies = mel_energy_features(wave, fe.mel_config, fe.mel_matrix)
        return _pcen_on_energies(fe, energies)
    if fe.kind == "tdfb":
        fm, cache = tdfb_forward(wave, fe.tdfb)
        return fm.values, ("tdfb", cache)
    if fe.kind == "tdfb_pcen":
        fm, tdfb_cache = tdfb_forward(wave, fe.tdfb)
        out, pcen_cache = pcen_forward(fm, fe.pcen)
        return out.values, ("tdfb_pcen", tdfb_cache, pcen_cache)
    raise ConfigError(f"unknown frontend '{fe.kind}'")


def _pcen_on_energies(fe: Frontend, energies: FeatureMap):
    out, cache = pcen_forward(energies, fe.pcen)
    return out.values, ("pcen", cache)


def _pcen_grads(p: PcenParams, cache, grad_values):
    grad_energy, g_alpha, g_delta, g_r = pcen_backward(grad_values, cache)
    grads = {}
    if p.learn_alpha:
        grads["pcen.alpha"] = g_alpha
    if p.learn_delta:
        grads["pcen.delta"] = g_delta
    if p.learn_r:
        grads["pcen.r"] = g_r
    return grads, grad_energy


def frontend_backward(fe: Frontend, grad_values: np.ndarray, cache) -> dict:
    """Gradients for the frontend's learnable tensors (empty for fixed
    frontends)."""
    if cache is None:
        return {}
    tag = cache[0]
    if tag == "pcen":
        grads, _ = _pcen_grads(fe.pcen, cache[1], grad_values)
        return grads
    if tag == "tdfb":
        grad_taps, _ = tdfb_backward(grad_values, cache[1], need_input_grad=False)
        return {"tdfb.conv_taps": grad_taps}
    if tag == "tdfb_pcen":
        grads, grad_energy = _pcen_grads(fe.pcen, cache[2], grad_values)
        grad_taps, _ = tdfb_backward(grad_energy, cache[1], need_input_grad=False)
        grads["tdfb.conv_taps"] = grad_taps
        return grads
    raise ValueError(f"unknown frontend cache tag '{tag}'")


# ---------------------------------------------------------------------------
# Train state


@dataclass
class TrainState:
    config: RunConfig
    frontend: Frontend
    model: ModelParams
    tensors: dict[str, np.ndarray]  # learnable tensors only
    opt: OptimizerState
    rng: np.random.Generator


def learnable_tensors(fe: Frontend, model: ModelParams) -> dict[str, np.ndarray]:
    tensors = dict(model.tensors())
    if fe.tdfb is not None:
        tensors["tdfb.conv_taps"] = fe.tdfb.conv_taps
    if fe.pcen is not None:
        if fe.pcen.learn_alpha:
            tensors["pcen.alpha"] = fe.pcen.alpha
        if fe.pcen.learn_delta:
            tensors["pcen.delta"] = fe.pcen.delta
        if fe.pcen.learn_r:
            tensors["pcen.r"] = fe.pcen.r
    return tensors


def checkpoint_tensors(state: TrainState) -> dict[str, np.ndarray]:
    """Every tensor a checkpoint stores: model weights, all frontend
    parameters (frozen ones included), and optimizer velocities."""
    tensors = dict(state.model.tensors())
    fe = state.frontend
    if fe.tdfb is not None:
        tensors["tdfb.conv_taps"] = fe.tdfb.conv_taps
    if fe.pcen is not None:
        tensors["pcen.alpha"] = fe.pcen.alpha
        tensors["pcen.delta"] = fe.pcen.delta
        tensors["pcen.r"] = fe.pcen.r
    for name, vel in state.opt.velocities.items():
        tensors["vel." + name] = vel
    return tensors


def make_train_state(cfg: RunConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    frontend = build_frontend(cfg)
    model = init_model_params(
        rng, cfg.n_filters, cfg.hidden_size, cfg.attn_size, cfg.n_labels
    )
    tensors = learnable_tensors(frontend, model)
    opt = init_optimizer(tensors, cfg.momentum, cfg.learning_rate)
    return TrainState(cfg, frontend, model, tensors, opt, rng)


def prepare_waveform(w: Waveform, cfg: RunConfig) -> Waveform:
    """Fixed-duration padding followed by pre-emphasis; both feature paths
    consume the identical prepared signal."""
    return preemphasis(pad_or_trim(w, cfg.clip_seconds), cfg.preemphasis_coeff)


def make_feature_provider(state: TrainState):
    """Frontend forward with the fixed part cached by utterance key.

    Mel features (and the pre-compression energies feeding PCEN) never change
    during training, so they are computed once per utterance; learnable parts
    are recomputed on every call.
    """
    fixed: dict = {}

    def provider(key: str, wave: Waveform):
        kind = state.config.frontend
        if kind in ("tdfb", "tdfb_pcen"):
            return frontend_forward(state.frontend, wave)
        cached = fixed.get(key)
        if kind in ("mel", "mel_mvn"):
            if cached is None:
                cached = frontend_forward(state.frontend, wave)[0]
                fixed[key] = cached
            return cached, None
        if cached is None:  # mel_pcen: energies fixed, normalization is not
            cached = mel_energy_features(
                wave, state.frontend.mel_config, state.frontend.mel_matrix
            )
            fixed[key] = cached
        return _pcen_on_energies(state.frontend, cached)

    return provider


def utterance_loss(state: TrainState, wave: Waveform, label_idx: int) -> float:
    values, _ = frontend_forward(state.frontend, wave)
    logits, _, _ = classifier_forward(values, state.model)
    loss, _ = cross_entropy_loss(logits, label_idx)
    return loss


def utterance_loss_and_grads(
    state: TrainState, wave: Waveform, label_idx: int, frontend_out=None
) -> tuple[float, dict[str, np.ndarray]]:
    """One full forward/backward pass; returns the loss and gradients for
    every learnable tensor."""
    if frontend_out is None:
        frontend_out = frontend_forward(state.frontend, wave)
    values, fe_cache = frontend_out
    logits, _, caches = classifier_forward(values, state.model)
    loss, grad_logits = cross_entropy_loss(logits, label_idx)
    grads, grad_values = classifier_backward(grad_logits, caches, state.model)
    grads.update(frontend_backward(state.frontend, grad_values, fe_cache))
    return loss, grads


def step_utterance(
    state: TrainState, wave: Waveform, label_idx: int, frontend_out=None
) -> float:
    loss, grads = utterance_loss_and_grads(state, wave, label_idx, frontend_out)
    sgd_momentum_step(state.tensors, grads, state.opt)
    return loss


def predict_label(state: TrainState, wave: Waveform, features=None) -> int:
    if features is None:
        features, _ = frontend_forward(state.frontend, wave)
    logits, _, _ = classifier_forward(features, state.model)
    return int(np.argmax(logits))


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    uar: float
    per_class_recall: dict[str, float]
    confusion: dict[str, dict[str, int]]
    n: int
    predictions: list[str]


def _n_threads() -> int:
    raw = os.environ.get("WAVEFRONT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate(
    state: TrainState,
    utterances: list[Utterance],
    wave_provider=None,
    threads: int | None = None,
) -> EvalResult:
    """Deterministic evaluation in the given utterance order. Parallel
    forward passes are capped by WAVEFRONT_THREADS (params are read-only)."""
    if wave_provider is None:
        cfg = state.config

        def wave_provider(utt):
            return prepare_waveform(read_wav(utt.path, cfg.sample_rate), cfg)

    if threads is None:
        threads = _n_threads()

    def run_one(utt):
        return predict_label(state, wave_provider(utt))

    if threads > 1 and len(utterances) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            indices = list(pool.map(run_one, utterances))
    else:
        indices = [run_one(u) for u in utterances]
    predictions = [LABELS[i] for i in indices]
    truths = [u.label for u in utterances]
    confusion = {t: {p: 0 for p in LABELS} for t in LABELS}
    for t, p in zip(truths, predictions):
        confusion[t][p] += 1
    recalls = {}
    for label in LABELS:
        total = sum(confusion[label].values())
        if total:
            recalls[label] = confusion[label][label] / total
    return EvalResult(
        uar=uar(predictions, truths),
        per_class_recall=recalls,
        confusion=confusion,
        n=len(utterances),
        predictions=predictions,
    )


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MAGIC = b"WFCP"
_CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned binary container: named float64 tensors plus a JSON header
    recording the config, its hash, seed, and epoch. Round-trips bit-exactly."""
    entries = []
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"version": _CKPT_VERSION, "meta": meta, "tensors": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != _CKPT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode())
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(8 * count)
            if len(blob) != 8 * count:
                raise OSError(f"truncated checkpoint payload in {path}")
            tensors[entry["name"]] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    return tensors, header["meta"]


def state_from_checkpoint(path) -> TrainState:
    """Rebuild a TrainState with all tensors (including frozen frontend
    parameters and optimizer velocities) restored bit-exactly."""
    tensors, meta = load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    state = make_train_state(cfg)
    targets = checkpoint_tensors(state)
    for name, value in tensors.items():
        if name not in targets:
            raise ConfigError(f"checkpoint tensor '{name}' not used by config")
        if targets[name].shape != value.shape:
            raise ConfigError(
                f"checkpoint tensor '{name}' has shape {value.shape}, "
                f"expected {targets[name].shape}"
            )
        targets[name][...] = value
    return state


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    config: RunConfig
    best_epoch: int
    best_valid_uar: float
    log_rows: list[tuple[int, float, float]]
    checkpoint_path: str
    state: TrainState


def train_run(
    manifest: Manifest,
    cfg: RunConfig,
    out_dir,
    checkpoint_name: str = "checkpoint.ckpt",
    log_name: str = "train_log.csv",
) -> TrainResult:
    """Train with early stopping on validation UAR; writes the best
    checkpoint, a per-epoch CSV log, and a config echo into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_utts = manifest.split("train")
    valid_utts = manifest.split("valid")
    if cfg.epochs > 0 and (not train_utts or not valid_utts):
        raise ConfigError("training needs non-empty train and valid splits")

    state = make_train_state(cfg)
    label_to_idx = {label: i for i, label in enumerate(LABELS)}

    waves: dict[str, Waveform] = {}

    def wave_of(utt: Utterance) -> Waveform:
        w = waves.get(utt.utt_id)
        if w is None:
            w = prepare_waveform(read_wav(utt.path, cfg.sample_rate), cfg)
            waves[utt.utt_id] = w
        return w

    provider = make_feature_provider(state)

    def frontend_out(utt: Utterance):
        return provider(utt.utt_id, wave_of(utt))

    def eval_features(utt: Utterance):
        values, _ = frontend_out(utt)
        return values

    def valid_uar() -> float:
        preds = [
            LABELS[predict_label(state, None, features=eval_features(u))]
            for u in valid_utts
        ]
        return uar(preds, [u.label for u in valid_utts])

    best_epoch = 0
    best_uar = -1.0
    best_tensors = {k: v.copy() for k, v in checkpoint_tensors(state).items()}
    log_rows: list[tuple[int, float, float]] = []

    for epoch in range(1, cfg.epochs + 1):
        order = state.rng.permutation(len(train_utts))
        losses = []
        for idx in order:
            utt = train_utts[idx]
            loss = step_utterance(
                state, None, label_to_idx[utt.label], frontend_out=frontend_out(utt)
            )
            losses.append(loss)
        epoch_uar = valid_uar()
        log_rows.append((epoch, float(np.mean(losses)), epoch_uar))
        if epoch_uar > best_uar:
            best_uar = epoch_uar
            best_epoch = epoch
            best_tensors = {
                k: v.copy() for k, v in checkpoint_tensors(state).items()
            }
        elif epoch - best_epoch >= cfg.patience:
            break

    meta = {
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "epoch": best_epoch,
        "frontend": cfg.frontend,
        "best_valid_uar": best_uar if best_uar >= 0 else None,
    }
    checkpoint_path = out_dir / checkpoint_name
    save_checkpoint(checkpoint_path, best_tensors, meta)

    with open(out_dir / log_name, "w") as fh:
        fh.write("epoch,train_loss,valid_uar\n")
        for epoch, loss, epoch_uar in log_rows:
            fh.write(f"{epoch},{loss!r},{epoch_uar!r}\n")
    with open(out_dir / "config.json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")

    return TrainResult(
        config=cfg,
        best_epoch=best_epoch,
        best_valid_uar=best_uar,
        log_rows=log_rows,
        checkpoint_path=str(checkpoint_path),
        state=state,
    )


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass(frozen=True)
class GradcheckRow:
    op: str
    tensor: str
    max_rel_err: float
    threshold: float
    passed: bool


def numeric_gradient(loss_fn, tensor: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences, perturbing the tensor in place."""
    grad = np.zeros_like(tensor)
    for idx in np.ndindex(tensor.shape):
        orig = tensor[idx]
        tensor[idx] = orig + h
        f_plus = loss_fn()
        tensor[idx] = orig - h
        f_minus = loss_fn()
        tensor[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _rows_for(op, loss_fn, analytic: dict, tensors: dict, threshold: float):
    rows = []
    for name, target in tensors.items():
        numeric = numeric_gradient(loss_fn, target)
        err = max_relative_error(analytic[name], numeric)
        rows.append(GradcheckRow(op, name, err, threshold, err < threshold))
    return rows


def _check_pcen(seed: int) -> list[GradcheckRow]:
    rows = []
    masks = (("r", "alpha", "delta"), ("r",), ("alpha",))
    for mask in masks:
        rng = np.random.default_rng(seed)
        n_channels, n_frames = 3, 10
        energy = rng.uniform(0.05, 3.0, (n_channels, n_frames))
        p = init_pcen_params(n_channels, learn=mask)
        p.alpha += rng.normal(0.0, 0.05, n_channels)
        p.delta += rng.uniform(-0.3, 0.5, n_channels)
        p.r += rng.normal(0.0, 0.08, n_channels)
        probe = rng.standard_normal((n_channels, n_frames))

        def loss_fn():
            out, _ = pcen_forward(
                FeatureMap(energy.copy(), "pre_compression_energy"), p
            )
            return float((out.values * probe).sum())

        out, cache = pcen_forward(
            FeatureMap(energy.copy(), "pre_compression_energy"), p
        )
        g_e, g_alpha, g_delta, g_r = pcen_backward(probe, cache)
        analytic = {"energy": g_e, "alpha": g_alpha, "delta": g_delta, "r": g_r}
        targets = {"energy": energy}
        if "alpha" in mask:
            targets["alpha"] = p.alpha
        if "delta" in mask:
            targets["delta"] = p.delta
        if "r" in mask:
            targets["r"] = p.r
        op = f"pcen[{','.join(mask)}]"
        rows.extend(_rows_for(op, loss_fn, analytic, targets, 1e-5))
    return rows


def _toy_tdfb_params(rng, apply_log: bool = True) -> TdfbParams:
    matrix = mel_filterbank_matrix(2, 64, 16000, 0.0, 8000.0)
    p = init_tdfb_params(
        matrix, kernel_width=9, lowpass_width=16, lowpass_stride=4,
        apply_log=apply_log,
    )
    p.conv_taps += 0.05 * rng.standard_normal(p.conv_taps.shape)
    return p


def _check_tdfb(seed: int) -> list[GradcheckRow]:
    rng = np.random.default_rng(seed)
    p = _toy_tdfb_params(rng)
    samples = rng.standard_normal(64)
    n_frames = (64 - p.lowpass_width) // p.lowpass_stride + 1
    probe = rng.standard_normal((p.n_filters, n_frames))

    def loss_fn():
        fm, _ = tdfb_forward(Waveform(samples.copy(), 16000), p)
        return float((fm.values * probe).sum())

    _, cache = tdfb_forward(Waveform(samples.copy(), 16000), p)
    grad_taps, grad_wave = tdfb_backward(probe, cache, need_input_grad=True)
    analytic = {"conv_taps": grad_taps, "waveform": grad_wave}
    targets = {"conv_taps": p.conv_taps, "waveform": samples}
    return _rows_for("tdfb", loss_fn, analytic, targets, 1e-5)


def _check_lstm(seed: int) -> list[GradcheckRow]:
    rng = np.random.default_rng(seed)
    n_frames, n_inputs, hidden, attn, n_labels = 4, 3, 5, 4, 2
    model = init_model_params(rng, n_inputs, hidden, attn, n_labels)
    features = rng.standard_normal((n_inputs, n_frames))
    label = 1

    def loss_fn():
        logits, _, _ = classifier_forward(features, model)
        return cross_entropy_loss(logits, label)[0]

    logits, _, caches = classifier_forward(features, model)
    _, grad_logits = cross_entropy_loss(logits, label)
    grads, grad_features = classifier_backward(grad_logits, caches, model)
    analytic = dict(grads)
    analytic["features"] = grad_features
    targets = dict(model.tensors())
    targets["features"] = features
    return _rows_for("lstm+attention", loss_fn, analytic, targets, 1e-4)


def _check_e2e(seed: int) -> list[GradcheckRow]:
    cfg = make_run_config(
        "tdfb_pcen",
        seed=seed,
        n_filters=2,
        win_len=9,
        hop=4,
        n_fft=64,
        hidden_size=4,
        attn_size=3,
        clip_seconds=64 / 16000,
    )
    state = make_train_state(cfg)
    rng = np.random.default_rng(seed + 1)
    state.frontend.tdfb.conv_taps += 0.05 * rng.standard_normal(
        state.frontend.tdfb.conv_taps.shape
    )
    wave = Waveform(rng.standard_normal(64), 16000)
    label = 0

    def loss_fn():
        return utterance_loss(state, wave, label)

    _, grads = utterance_loss_and_grads(state, wave, label)
    return _rows_for("e2e", loss_fn, grads, dict(state.tensors), 1e-4)


def _check_selftest_broken(seed: int) -> list[GradcheckRow]:
    # Harness self-test: a deliberately wrong analytic gradient must fail.
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal(4)
    probe = rng.standard_normal(3)

    def loss_fn():
        return float((w @ x) @ probe)

    analytic = np.outer(probe, x)
    analytic[0, 0] *= 1.01  # the deliberate error
    numeric = numeric_gradient(loss_fn, w)
    err = max_relative_error(analytic, numeric)
    return [GradcheckRow("selftest-broken", "w", err, 1e-5, err < 1e-5)]


GRADCHECK_OPS = {
    "pcen": _check_pcen,
    "tdfb": _check_tdfb,
    "lstm": _check_lstm,
    "e2e": _check_e2e,
    "selftest-broken": _check_selftest_broken,
}

# "all" runs the real operators; the broken self-test is opt-in.
GRADCHECK_ALL = ("pcen", "tdfb", "lstm", "e2e")


def run_gradcheck(op: str = "all", seed: int = 0) -> list[GradcheckRow]:
    if op == "all":
        rows = []
        for name in GRADCHECK_ALL:
            rows.extend(GRADCHECK_OPS[name](seed))
        return rows
    if op not in GRADCHECK_OPS:
        raise ConfigError(
            f"unknown gradcheck op '{op}' "
            f"(choose from all, {', '.join(GRADCHECK_OPS)})"
        )
    return GRADCHECK_OPS[op](seed)
