"""Pre-training loop: twin noisy forward passes, three losses, Adam updates.

Randomness is drawn from named streams keyed by ``(seed, stream, step)``
(and the utterance id for augmentation), so a run resumed from a
checkpoint at step ``k`` replays steps ``k+1..N`` exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import correlation as corr
from . import model as M
from .audio import NoiseBank, Waveform, make_augmented_pair, utterance_rng
from .correlation import LossBreakdown, SampledFrames, total_loss
from .evaluation import diagonality
from .features import FeatureConfig, mfcc
from .model import ModelConfig
from .units import Codebook, CodeSequence, assign_codes

CHECKPOINT_MAGIC = b"DHCK"
CHECKPOINT_VERSION = 1

STREAM_AUGMENT = 1
STREAM_MASK = 2
STREAM_CC = 3
STREAM_SC = 4
STREAM_SHUFFLE = 5


class TrainingError(Exception):
    pass


class DivergedError(TrainingError):
    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


class CheckpointError(TrainingError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 7e-5
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    steps: int = 500
    batch_size: int = 8
    snr_range: tuple[float, float] = (0.0, 25.0)
    n_cc: int = corr.DEFAULT_SAMPLE_SIZE
    n_sc: int = corr.DEFAULT_SAMPLE_SIZE
    lam: float = corr.DEFAULT_LAMBDA
    alpha: float = corr.DEFAULT_ALPHA
    beta: float = corr.DEFAULT_BETA
    seed: int = 0
    checkpoint_every: int = 100
    corr_eps: float = corr.DEFAULT_EPS
    center_features: bool = False
    log_wall_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "snr_range", tuple(float(s) for s in self.snr_range))
        if self.lr <= 0 or self.eps <= 0 or self.corr_eps <= 0:
            raise ConfigError("lr, eps and corr_eps must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError("betas must be two values in [0, 1)")
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1, checkpoint_every >= 1 required")
        if self.n_cc < 2 or self.n_sc < 2:
            raise ConfigError("sample sizes must be at least 2")
        if self.snr_range[0] > self.snr_range[1]:
            raise ConfigError("snr_range must be ordered")
        if min(self.lam, self.alpha, self.beta) < 0:
            raise ConfigError("lam, alpha, beta must be non-negative")


# ---------------------------------------------------------------------------
# config text: canonical "section.field=value" lines


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(":".join(str(x) for x in item) for item in v)
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return tuple(tuple(int(x) for x in item.split(":")) for item in text.split(","))
        return tuple(float(x) for x in text.split(","))
    return text


DATA_KEYS = ("corpus", "noise_bank", "codebook")


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig, data: dict | None = None) -> str:
    lines = []
    for prefix, obj in (("model", model_cfg), ("train", train_cfg)):
        for f in dataclasses.fields(obj):
            lines.append(f"{prefix}.{f.name}={_format_value(getattr(obj, f.name))}")
    for k, v in sorted((data or {}).items()):
        lines.append(f"data.{k}={v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base_model: ModelConfig | None = None,
                 base_train: TrainConfig | None = None):
    """Parse config text into ``(ModelConfig, TrainConfig, data_paths)``.

    Missing keys keep the base (default) values; unknown keys raise
    :class:`ConfigError`.
    """
    base_model = base_model or ModelConfig()
    base_train = base_train or TrainConfig()
    updates = {"model": {}, "train": {}}
    data = {}
    fields = {"model": {f.name for f in dataclasses.fields(ModelConfig)},
              "train": {f.name for f in dataclasses.fields(TrainConfig)}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section == "data" and name in DATA_KEYS:
            data[name] = value
            continue
        if section not in fields or name not in fields[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        base = base_model if section == "model" else base_train
        try:
            updates[section][name] = _parse_value(value, getattr(base, name))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    try:
        return (dataclasses.replace(base_model, **updates["model"]),
                dataclasses.replace(base_train, **updates["train"]), data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# the combined objective


@dataclass
class StepBatch:
    """Everything random about one step, fixed in advance."""

    noisy_a: list[np.ndarray]
    noisy_b: list[np.ndarray]
    codes: list[np.ndarray]
    masks: list[np.ndarray]
    cc_sample: SampledFrames
    sc_sample: SampledFrames
    masks_b: list[np.ndarray] | None = None
    ids: list[str] = field(default_factory=list)

    @property
    def valid_lengths(self) -> list[int]:
        return [len(c) for c in self.codes]


@dataclass
class StepResult:
    breakdown: LossBreakdown
    grads: dict | None
    cc: corr.CorrelationMatrix | None
    sc: corr.CorrelationMatrix | None
    mask_acc: float


def _scatter_rows(targets, sample, lengths, rows):
    utt, pos = sample.locate(lengths)
    for u, t, r in zip(utt, pos, rows):
        targets[u][t] += r


def forward_backward(params, cfg: ModelConfig, batch: StepBatch, alpha=corr.DEFAULT_ALPHA,
                     beta=corr.DEFAULT_BETA, lam=corr.DEFAULT_LAMBDA, eps=corr.DEFAULT_EPS,
                     center=False, compute_grad=True, skip_zero_weight=False) -> StepResult:
    """Loss breakdown (and gradients) for one fully specified batch.

    Branch A goes through the whole network; branch B stops after the
    convolutional encoder and only feeds the cross-correlation loss. Loss
    terms whose weight is zero contribute no gradient; with
    ``skip_zero_weight`` they are not evaluated at all and report 0.
    """
    grads = M.zeros_like(params) if compute_grad else None
    lengths = batch.valid_lengths
    do_cc = not (skip_zero_weight and alpha == 0.0)
    do_sc = not (skip_zero_weight and beta == 0.0)

    xa, ca = zip(*(M.cnn_forward(params, cfg, s) for s in batch.noisy_a))
    for x, n in zip(xa, lengths):
        if x.shape[0] != n:
            raise M.ModelError(f"encoder gives {x.shape[0]} frames, codes have {n}")
    dxa = [np.zeros_like(x) for x in xa]

    l_cc, cc = 0.0, None
    if do_cc or cfg.dual_branch_hb:
        xb, cb = zip(*(M.cnn_forward(params, cfg, s) for s in batch.noisy_b))
        dxb = [np.zeros_like(x) for x in xb]
    if do_cc:
        Wc, bc = params["proj_cc.W"], params["proj_cc.b"]
        sa = corr.gather_frames(xa, lengths, batch.cc_sample)
        sb = corr.gather_frames(xb, lengths, batch.cc_sample)
        l_cc, cc, dya, dyb = corr.correlation_loss_and_grad(sa @ Wc + bc, sb @ Wc + bc, lam, eps, center)
        if compute_grad and alpha != 0.0:
            dya, dyb = alpha * dya, alpha * dyb
            grads["proj_cc.W"] += sa.T @ dya + sb.T @ dyb
            grads["proj_cc.b"] += dya.sum(axis=0) + dyb.sum(axis=0)
            _scatter_rows(dxa, batch.cc_sample, lengths, dya @ Wc.T)
            _scatter_rows(dxb, batch.cc_sample, lengths, dyb @ Wc.T)

    outs = [M.context_forward(params, cfg, x, m) for x, m in zip(xa, batch.masks)]
    zs = [o[0] for o in outs]
    logits = [o[1] for o in outs]
    all_logits, all_codes, all_masks = list(logits), list(batch.codes), list(batch.masks)
    outs_b = []
    if cfg.dual_branch_hb:
        outs_b = [M.context_forward(params, cfg, x, m) for x, m in zip(xb, batch.masks_b)]
        all_logits += [o[1] for o in outs_b]
        all_codes += list(batch.codes)
        all_masks += list(batch.masks_b)
    l_hb, dlogits = M.masked_prediction(all_logits, all_codes, all_masks)
    if not isinstance(dlogits, list):
        dlogits = [dlogits]
    acc = M.masked_accuracy(logits, batch.codes, batch.masks)

    l_sc, sc = 0.0, None
    dzs = [np.zeros_like(z) for z in zs]
    if do_sc:
        Ws, bs = params["proj_sc.W"], params["proj_sc.b"]
        sz = corr.gather_frames(zs, lengths, batch.sc_sample)
        l_sc, sc, dp, _ = corr.correlation_loss_and_grad(sz @ Ws + bs, None, lam, eps, center)
        if compute_grad and beta != 0.0:
            dp = beta * dp
            grads["proj_sc.W"] += sz.T @ dp
            grads["proj_sc.b"] += dp.sum(axis=0)
            _scatter_rows(dzs, batch.sc_sample, lengths, dp @ Ws.T)

    breakdown = total_loss(l_hb, l_cc, l_sc, alpha, beta, lam)
    if compute_grad:
        for i, o in enumerate(outs):
            dxa[i] += M.context_backward(dzs[i], dlogits[i], o[2], params, cfg, grads)
        for i, o in enumerate(outs_b):
            dxb[i] += M.context_backward(None, dlogits[len(outs) + i], o[2], params, cfg, grads)
        for d, c in zip(dxa, ca):
            M.cnn_backward(d, c, params, cfg, grads)
        if do_cc or cfg.dual_branch_hb:
            for d, c in zip(dxb, cb):
                if np.any(d):
                    M.cnn_backward(d, c, params, cfg, grads)
    return StepResult(breakdown, grads, cc, sc, acc)


# ---------------------------------------------------------------------------
# state, optimizer, step


@dataclass
class TrainState:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict
    m: dict
    v: dict
    step: int = 0
    running: dict = field(default_factory=lambda: {"l_hb": 0.0, "l_cc": 0.0, "l_sc": 0.0, "total": 0.0})

    @classmethod
    def initial(cls, model_cfg: ModelConfig, train_cfg: TrainConfig) -> "TrainState":
        params = M.init_params(model_cfg, np.random.default_rng([train_cfg.seed, 0]))
        return cls(model_cfg, train_cfg, params, M.zeros_like(params), M.zeros_like(params))

    def stream(self, stream_id: int, step: int | None = None) -> np.random.Generator:
        return np.random.default_rng([self.train_cfg.seed, stream_id, self.step + 1 if step is None else step])


def adam_update(state: TrainState, grads: dict) -> None:
    cfg = state.train_cfg
    b1, b2 = cfg.betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in state.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if not np.all(np.isfinite(p)):
            raise DivergedError(f"parameter {name} became non-finite at step {t}")


@dataclass(frozen=True, eq=False)
class Example:
    """A clean utterance with its clean-audio codes."""

    utterance_id: str
    clean: Waveform
    codes: CodeSequence


def prepare_batch(state: TrainState, batch: Sequence[Example], bank: NoiseBank) -> StepBatch:
    cfg, tcfg = state.model_cfg, state.train_cfg
    step = state.step + 1
    noisy_a, noisy_b, codes = [], [], []
    for ex in batch:
        T = cfg.num_frames(len(ex.clean))
        if len(ex.codes) != T:
            raise TrainingError(f"{ex.utterance_id}: {len(ex.codes)} codes for {T} encoder frames")
        pair = make_augmented_pair(ex.clean, bank, tcfg.snr_range,
                                   utterance_rng(tcfg.seed, ex.utterance_id, STREAM_AUGMENT, step))
        # targets stay tied to the clean signal the noisy inputs were built from
        assert pair.clean is ex.clean
        noisy_a.append(pair.noisy_a.samples)
        noisy_b.append(pair.noisy_b.samples)
        codes.append(ex.codes.codes)
    lengths = [len(c) for c in codes]
    mask_rng = state.stream(STREAM_MASK)
    masks_b = None
    for attempt in range(2):
        masks = [M.sample_mask_spans(n, cfg.mask_prob, cfg.mask_span, mask_rng).masked for n in lengths]
        if cfg.dual_branch_hb:
            masks_b = [M.sample_mask_spans(n, cfg.mask_prob, cfg.mask_span, mask_rng).masked for n in lengths]
        if sum(int(m.sum()) for m in masks) > 0:
            break
    else:
        raise M.EmptyMaskError(f"step {step}: mask empty after resampling")
    cc = corr.sample_frames(lengths, tcfg.n_cc, state.stream(STREAM_CC))
    sc = corr.sample_frames(lengths, tcfg.n_sc, state.stream(STREAM_SC))
    return StepBatch(noisy_a, noisy_b, codes, masks, cc, sc, masks_b, [ex.utterance_id for ex in batch])


def train_step(state: TrainState, batch: Sequence[Example], bank: NoiseBank,
               skip_zero_weight: bool = False) -> tuple[TrainState, LossBreakdown, StepResult]:
    """One deHuBERT update; ``state`` is advanced in place and returned."""
    if not batch:
        raise TrainingError("empty batch")
    tcfg = state.train_cfg
    sb = prepare_batch(state, batch, bank)
    res = forward_backward(state.params, state.model_cfg, sb, tcfg.alpha, tcfg.beta, tcfg.lam,
                           tcfg.corr_eps, tcfg.center_features, skip_zero_weight=skip_zero_weight)
    bd = res.breakdown
    if not math.isfinite(bd.total):
        raise DivergedError(f"non-finite loss at step {state.step + 1}", sb.ids)
    if res.sc is not None:
        diag = np.diagonal(res.sc.C)
        live = diag != 0.0  # all-zero columns correlate to 0, not 1
        if np.any(np.abs(diag[live] - 1.0) > 1e-9):
            raise TrainingError("self-correlation diagonal drifted from 1")
    adam_update(state, res.grads)
    state.step += 1
    k = state.step
    for name in state.running:
        state.running[name] += (getattr(bd, name) - state.running[name]) / min(k, 100)
    return state, bd, res


# ---------------------------------------------------------------------------
# checkpoints: magic, version u32, text length u32, text, records, crc32


def _record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return (struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def save_checkpoint(state: TrainState, path) -> Path:
    text = dump_config(state.model_cfg, state.train_cfg)
    text += f"state.step={state.step}\n"
    for k, v in state.running.items():
        text += f"state.running.{k}={v!r}\n"
    blob = text.encode("utf-8")
    body = bytearray(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob)
    names = sorted(state.params)
    body += struct.pack("<I", 3 * len(names))
    for prefix, store in (("param", state.params), ("adam_m", state.m), ("adam_v", state.v)):
        for name in names:
            body += _record(f"{prefix}/{name}", store[name])
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> TrainState:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("not a checkpoint file")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptCheckpointError("checksum mismatch (truncated or corrupted file)")
    version, tlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 12 + tlen
    lines = raw[12:pos].decode("utf-8").splitlines()
    cfg_lines = [l for l in lines if not l.startswith("state.")]
    model_cfg, train_cfg, _ = parse_config("\n".join(cfg_lines))
    meta = dict(l.split("=", 1) for l in lines if l.startswith("state."))
    stores = {"param": {}, "adam_m": {}, "adam_v": {}}
    (count,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    end = len(raw) - 4
    for _ in range(count):
        (nlen,) = struct.unpack("<I", raw[pos:pos + 4])
        name = raw[pos + 4:pos + 4 + nlen].decode("utf-8")
        pos += 4 + nlen
        (rank,) = struct.unpack("<I", raw[pos:pos + 4])
        dims = struct.unpack(f"<{rank}I", raw[pos + 4:pos + 4 + 4 * rank])
        pos += 4 + 4 * rank
        size = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + size > end:
            raise CorruptCheckpointError(f"record {name} runs past end of file")
        arr = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(dims).astype(np.float64)
        pos += size
        prefix, _, pname = name.partition("/")
        stores[prefix][pname] = arr
    if pos != end:
        raise CorruptCheckpointError("trailing bytes after records")
    running = {k[len("state.running."):]: float(v) for k, v in meta.items() if k.startswith("state.running.")}
    return TrainState(model_cfg, train_cfg, stores["param"], stores["adam_m"], stores["adam_v"],
                      int(meta["state.step"]), running)


# ---------------------------------------------------------------------------
# corpus preparation and the outer loop


def feature_config_for(cfg: ModelConfig, sample_rate: int = 16000, **kw) -> FeatureConfig:
    """MFCC settings whose frames coincide with the encoder's output frames."""
    fc = FeatureConfig(sample_rate=sample_rate, hop_samples=cfg.stride, **kw)
    if fc.frame_samples != cfg.receptive_field:
        raise ConfigError(f"MFCC frame of {fc.frame_samples} samples does not match the "
                          f"encoder receptive field of {cfg.receptive_field}")
    return fc


def make_examples(utterances: Sequence[tuple[str, Waveform]], codebook: Codebook,
                  feature_cfg: FeatureConfig) -> list[Example]:
    """Codes from the CLEAN audio of every utterance."""
    return [Example(uid, w, assign_codes(mfcc(w, feature_cfg), codebook)) for uid, w in utterances]


def batch_for_step(n_items: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Indices of the batch used at 1-based ``step``; epochs reshuffle, tail dropped."""
    per_epoch = max(1, n_items // batch_size)
    epoch, slot = divmod(step - 1, per_epoch)
    order = np.random.default_rng([seed, STREAM_SHUFFLE, epoch]).permutation(n_items)
    return [int(i) for i in order[slot * batch_size:(slot + 1) * batch_size]]


def metrics_row(step: int, bd: LossBreakdown, res: StepResult, wall_ms) -> str:
    row = {"step": step, "l_hb": bd.l_hb, "l_cc": bd.l_cc, "l_sc": bd.l_sc, "total": bd.total,
           "wall_ms": wall_ms, "mask_acc": res.mask_acc,
           "diag_cc": diagonality(res.cc) if res.cc is not None else None}
    return json.dumps(row)


def pretrain(model_cfg: ModelConfig, train_cfg: TrainConfig, examples: Sequence[Example],
             bank: NoiseBank, out_dir, resume: TrainState | None = None, log=None) -> Path:
    """Run ``train_cfg.steps`` updates, writing checkpoints and ``metrics.jsonl`` under ``out_dir``.

    Returns the path of the final checkpoint. With ``resume`` the loop
    continues from ``resume.step`` and rewrites metrics rows after it.
    """
    if not examples:
        raise TrainingError("empty corpus")
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    state = resume if resume is not None else TrainState.initial(model_cfg, train_cfg)
    if resume is None:
        metrics_path.write_text("")
        save_checkpoint(state, ckpt_dir / f"step_{0:08d}.dhck")
    else:
        kept = []
        if metrics_path.exists():
            kept = [l for l in metrics_path.read_text().splitlines()
                    if l and json.loads(l)["step"] <= state.step]
        metrics_path.write_text("".join(l + "\n" for l in kept))
    tcfg = state.train_cfg
    bs = min(tcfg.batch_size, len(examples))
    with open(metrics_path, "a", encoding="utf-8") as mf:
        while state.step < tcfg.steps:
            t0 = time.perf_counter()
            idx = batch_for_step(len(examples), bs, tcfg.seed, state.step + 1)
            batch = [examples[i] for i in idx]
            try:
                _, bd, res = train_step(state, batch, bank)
            except (DivergedError, corr.NonFiniteLossError) as exc:
                ids = [ex.utterance_id for ex in batch]
                (out / "diverged.json").write_text(json.dumps({"step": state.step + 1, "batch_ids": ids,
                                                               "error": str(exc)}))
                raise DivergedError(f"training diverged at step {state.step + 1}: {exc}", ids) from exc
            wall = round((time.perf_counter() - t0) * 1000.0, 3) if tcfg.log_wall_time else None
            mf.write(metrics_row(state.step, bd, res, wall) + "\n")
            mf.flush()
            if log is not None:
                log(state.step, bd, res)
            if state.step % tcfg.checkpoint_every == 0:
                save_checkpoint(state, ckpt_dir / f"step_{state.step:08d}.dhck")
    final = save_checkpoint(state, ckpt_dir / "final.dhck")
    return final
