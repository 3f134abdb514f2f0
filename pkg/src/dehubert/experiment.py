"""Toy baseline-versus-deHuBERT comparison on synthetic data."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import synth
from .audio import make_augmented_pair, utterance_rng
from .correlation import (DEFAULT_ALPHA, DEFAULT_BETA, GradProbe, correlation_matrix, gather_frames,
                          grad_check, sample_frames)
from .evaluation import diagonality, embed_noisy, noise_probe
from .features import mfcc
from .model import ModelConfig
from .training import (Example, TrainConfig, TrainState, batch_for_step, feature_config_for,
                       forward_backward, make_examples, prepare_batch, train_step)
from .units import CodeSequence, fit_kmeans


@dataclass(frozen=True)
class ToySetup:
    n_utts: int = 200
    min_dur: float = 0.08
    max_dur: float = 0.14
    n_probe: int = 60
    n_eval: int = 60
    probe_k: int = 5
    data_seed: int = 0
    model: ModelConfig = ModelConfig(d_model=64, n_transformer_layers=2, K=8)
    train: TrainConfig = TrainConfig(lr=2e-3, steps=500, batch_size=8, seed=1)


@dataclass
class RunSummary:
    alpha: float
    beta: float
    probe_acc: float
    mask_acc: float
    diag_start: float
    diag_end: float
    history: list = field(default_factory=list, repr=False)
    seconds: float = 0.0
    params: dict | None = field(default=None, repr=False)


def build_data(setup: ToySetup):
    utts = synth.toy_corpus(setup.n_utts, setup.data_seed, setup.min_dur, setup.max_dur)
    bank = synth.toy_bank(setup.data_seed)
    fc = feature_config_for(setup.model)
    feats = [mfcc(w, fc) for _, w in utts]
    cb = fit_kmeans(feats, setup.model.K, np.random.default_rng([setup.data_seed, 11]))
    return utts, bank, make_examples(utts, cb, fc)


def _eval_batch(setup, examples, bank):
    """Fixed noisy inputs, masks and CC sample shared by every evaluated model."""
    cfg = setup.model
    chosen = examples[: setup.n_eval]
    xa, xb, codes, masks = [], [], [], []
    for i, ex in enumerate(chosen):
        pair = make_augmented_pair(ex.clean, bank, setup.train.snr_range,
                                   utterance_rng(setup.data_seed, ex.utterance_id, 99))
        xa.append(pair.noisy_a)
        xb.append(pair.noisy_b)
        codes.append(ex.codes.codes)
        rng = utterance_rng(setup.data_seed, ex.utterance_id, 98)
        m = M.sample_mask_spans(len(ex.codes), cfg.mask_prob, cfg.mask_span, rng).masked
        masks.append(m)
    lengths = [len(c) for c in codes]
    sample = sample_frames(lengths, setup.train.n_cc, np.random.default_rng([setup.data_seed, 97]))
    return xa, xb, codes, masks, lengths, sample


def cc_diagonality(params, cfg, evalset) -> float:
    xa, xb, _, _, lengths, sample = evalset
    W, b = params["proj_cc.W"], params["proj_cc.b"]
    ya = gather_frames([M.encode_cnn(params, cfg, w).data for w in xa], lengths, sample) @ W + b
    yb = gather_frames([M.encode_cnn(params, cfg, w).data for w in xb], lengths, sample) @ W + b
    return diagonality(correlation_matrix(ya, yb))


def masked_code_accuracy(params, cfg, evalset) -> float:
    xa, _, codes, masks, _, _ = evalset
    logits = []
    for w, m in zip(xa, masks):
        X, _ = M.cnn_forward(params, cfg, w.samples)
        logits.append(M.context_forward(params, cfg, X, m)[1])
    return M.masked_accuracy(logits, codes, masks)


def run_variant(setup: ToySetup, examples, bank, utts, alpha: float, beta: float,
                log_every: int = 0) -> RunSummary:
    t0 = time.perf_counter()
    tcfg = dataclasses.replace(setup.train, alpha=alpha, beta=beta)
    state = TrainState.initial(setup.model, tcfg)
    evalset = _eval_batch(setup, examples, bank)
    diag_start = cc_diagonality(state.params, setup.model, evalset)
    history = []
    bs = min(tcfg.batch_size, len(examples))
    while state.step < tcfg.steps:
        idx = batch_for_step(len(examples), bs, tcfg.seed, state.step + 1)
        _, bd, res = train_step(state, [examples[i] for i in idx], bank)
        history.append((state.step, bd, res.mask_acc))
        if log_every and state.step % log_every == 0:
            print(f"  step {state.step}: hb={bd.l_hb:.3f} cc={bd.l_cc:.3f} sc={bd.l_sc:.3f} "
                  f"acc={res.mask_acc:.3f}", flush=True)
    probe_set = embed_noisy(state.params, setup.model, utts[: setup.n_probe], bank, 0.0, setup.data_seed)
    return RunSummary(alpha, beta, noise_probe(probe_set, setup.probe_k),
                      masked_code_accuracy(state.params, setup.model, evalset),
                      diag_start, cc_diagonality(state.params, setup.model, evalset),
                      history, time.perf_counter() - t0, state.params)


def compare(setup: ToySetup = ToySetup(), log_every: int = 0):
    """Train the baseline (alpha = beta = 0) and deHuBERT (0.5, 0.5) with identical seeds."""
    utts, bank, examples = build_data(setup)
    base = run_variant(setup, examples, bank, utts, 0.0, 0.0, log_every)
    ours = run_variant(setup, examples, bank, utts, 0.5, 0.5, log_every)
    return base, ours


# ---------------------------------------------------------------------------
# end-to-end gradient verification on a tiny network

GRAD_CHECK_MODEL = ModelConfig(conv_layers=((8, 394, 2), (16, 4, 2)), d_model=16, n_transformer_layers=1,
                               n_heads=2, ff_width=32, K=5, proj_cc_dim=12, proj_sc_dim=20,
                               mask_prob=0.15, mask_span=3)


def grad_check_batch(model_cfg: ModelConfig = GRAD_CHECK_MODEL, seed: int = 0, n_utts: int = 3,
                     n_sample: int = 64):
    """Initial state and one fixed batch of short synthetic utterances with random codes."""
    tcfg = TrainConfig(seed=seed, n_cc=n_sample, n_sc=n_sample)
    rng = np.random.default_rng([seed, 21])
    examples = []
    for uid, w in synth.toy_corpus(n_utts, seed, 0.04, 0.05):
        T = model_cfg.num_frames(len(w))
        examples.append(Example(uid, w, CodeSequence(rng.integers(0, model_cfg.K, T), T)))
    state = TrainState.initial(model_cfg, tcfg)
    return state, prepare_batch(state, examples, synth.toy_bank(seed, 0.5))


def objective_grad_check(loss: str = "total", n_probes: int = 32, step: float = 1e-6,
                         model_cfg: ModelConfig = GRAD_CHECK_MODEL, seed: int = 0,
                         tol: float | None = None) -> list[GradProbe]:
    """Finite-difference check of ``loss`` ("cc", "sc" or "total") w.r.t. every parameter.

    The isolated cc/sc gradients are the difference between a run with that
    term switched on at weight 1 and one with both correlation weights at 0.
    """
    state, sb = grad_check_batch(model_cfg, seed)
    weights = {"total": (DEFAULT_ALPHA, DEFAULT_BETA), "cc": (1.0, 0.0), "sc": (0.0, 1.0)}
    if loss not in weights:
        raise ValueError(f"unknown loss {loss!r}")
    alpha, beta = weights[loss]

    def fun(p):
        r = forward_backward(p, model_cfg, sb, alpha, beta)
        if loss == "total":
            return r.breakdown.total, r.grads
        base = forward_backward(p, model_cfg, sb, 0.0, 0.0, skip_zero_weight=True).grads
        value = r.breakdown.l_cc if loss == "cc" else r.breakdown.l_sc
        return value, {k: r.grads[k] - base[k] for k in r.grads}

    # probe only parameters the loss actually reaches
    on_path = {"total": lambda k: True,
               "cc": lambda k: k.startswith(("cnn.", "proj_cc.")),
               "sc": lambda k: not k.startswith(("head.", "proj_cc."))}[loss]
    names = [k for k in sorted(state.params) if on_path(k)]
    rng = np.random.default_rng([seed, 22])
    report = grad_check(fun, state.params, step=step, n_probes=n_probes, rng=rng, names=names, tol=tol)
    return [dataclasses.replace(p, name=f"{loss}/{p.name}") for p in report]
