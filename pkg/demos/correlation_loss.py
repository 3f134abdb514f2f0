"""
Correlation matrices and the redundancy-reduction loss
=======================================================

Two noisy "views" of the same frames should give a correlation matrix
close to the identity. This walks through the pieces on random data.
"""

import numpy as np

from dehubert.correlation import (correlation_loss, correlation_loss_and_grad,
                                  correlation_matrix, sample_frames, gather_frames)

rng = np.random.default_rng(0)

# 640 frames of a 6-dim embedding, and a second view with a little noise
Y = rng.normal(size=(640, 6))
Y_noisy = Y + 0.3 * rng.normal(size=Y.shape)

C = correlation_matrix(Y, Y_noisy)
print("cross-correlation diagonal:", np.round(np.diagonal(C.C), 3))
print("loss (lambda=0.005):", correlation_loss(C, 0.005))

# unrelated views push the diagonal toward 0 and the loss toward d = 6
C_far = correlation_matrix(Y, rng.normal(size=Y.shape))
print("loss with unrelated views:", correlation_loss(C_far, 0.005))

# self-correlation always has a unit diagonal, so only the off-diagonal part is left
S = correlation_matrix(Y, Y)
print("self-correlation diagonal:", np.round(np.diagonal(S.C), 12))

# a few gradient steps on Y_noisy alone already pull the matrix toward I
Z = Y_noisy.copy()
for step in range(200):
    loss, _, _, dZ = correlation_loss_and_grad(Y, Z, lam=0.005)
    Z -= 5.0 * dZ
print("after 200 steps:", round(loss, 5))

# frames are sampled from the valid (unpadded) part of a batch, identically for both views
lengths = [120, 300, 75]
s = sample_frames(lengths, 64, rng)
views = [rng.normal(size=(n, 6)) for n in lengths]
print("sampled", s.n, "of", s.pool_size, "frames; gathered shape", gather_frames(views, lengths, s).shape)
