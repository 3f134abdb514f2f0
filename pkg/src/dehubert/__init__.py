"""Noise-robust HuBERT-style pre-training with correlation losses, in numpy."""
