"""
End-to-end toy pipeline
=======================

Synthetic pseudo-speech -> MFCC -> K-means codes -> a short pre-training run
-> noise probe on pooled bottleneck features. Takes about a minute.
"""

import tempfile
from pathlib import Path

import numpy as np

from dehubert import synth
from dehubert.audio import load_corpus, read_noise_manifest
from dehubert.evaluation import embed_noisy, noise_probe
from dehubert.features import mfcc
from dehubert.model import ModelConfig
from dehubert.training import TrainConfig, feature_config_for, load_checkpoint, make_examples, pretrain
from dehubert.units import fit_kmeans

work = Path(tempfile.mkdtemp(prefix="dehubert_demo_"))

# 40 short utterances and three noise types written as 16-bit WAVs with manifests
corpus_tsv, noise_tsv = synth.write_toy_data(work / "data", n_utts=40, seed=0, min_dur=0.08, max_dur=0.14)
utts = load_corpus(corpus_tsv)
bank = read_noise_manifest(noise_tsv)
print(len(utts), "utterances;", "noises:", bank.ids)

# MFCC frames line up with the encoder frames: 25 ms window, hop = total conv stride
model_cfg = ModelConfig()
fc = feature_config_for(model_cfg)
feats = [mfcc(w, fc) for _, w in utts]
cb = fit_kmeans(feats, model_cfg.K, np.random.default_rng(0))
print("k-means inertia:", [round(v, 1) for v in cb.inertia[:3]], "...", round(cb.inertia[-1], 1))

# codes always come from the clean audio
examples = make_examples(utts, cb, fc)

train_cfg = TrainConfig(lr=1e-3, steps=60, batch_size=8, seed=0, checkpoint_every=20)


def log(step, bd, res):
    if step % 20 == 0:
        print(f"step {step}: hb {bd.l_hb:.3f}  cc {bd.l_cc:.3f}  sc {bd.l_sc:.3f}  mask acc {res.mask_acc:.2f}")


final = pretrain(model_cfg, train_cfg, examples, bank, work / "run", log=log)
state = load_checkpoint(final)

# every utterance mixed at 0 dB with every noise, mean-pooled, then leave-one-out 5-NN
embs = embed_noisy(state.params, model_cfg, utts, bank, snr_db=0.0)
print("noise probe accuracy (lower = more noise-invariant):", round(noise_probe(embs, 5), 3))
print("outputs under", work)
