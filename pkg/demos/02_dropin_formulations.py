"""The four convolutional stand-ins for an attention head, side by side.

A head whose weight matrix barely moves can be replaced by a fixed
spatial kernel over its value tensor. That kernel can be shared across
channels and folded into the value projection (full convolution), or kept
per channel after the projection (depthwise, much cheaper). Ensembling
merges all heads of a block into one before convolving.
"""

import numpy as np

from dwdropin import dropin, vit
from dwdropin.tensor import seeded_fill
from dwdropin.vit import grid, head_cols

cfg = vit.DESK
model = vit.init_model(cfg, seed=3)
block = model.blocks[0]
x = seeded_fill((cfg.n, cfg.d), 11, "gaussian")
xg = grid(x, cfg.m)
w_v = head_cols(block.w_v, 0, cfg.d_h)

# Full convolution: shared k x k kernel folded into the value projection.
k_shared = seeded_fill((cfg.k, cfg.k), 21, "gaussian", 0.0, 1 / cfg.k)
folded = dropin.fold_full_kernel(k_shared, w_v)
out_full = dropin.attn_conv_full(xg, folded)
print(f"full conv: folded kernel {folded.shape} -> output {out_full.shape}")

# Depthwise: project first, then one k x k filter per channel.
k_dw = seeded_fill((cfg.k, cfg.k, cfg.d_h), 22, "gaussian", 0.0, 1 / cfg.k)
out_dw = dropin.attn_dw(xg, w_v, k_dw)
print(f"depthwise: kernel {k_dw.shape} -> output {out_dw.shape}")

# Replicating the shared kernel across channels recovers the full conv.
shared_dw = np.repeat(k_shared[:, :, None], cfg.d_h, axis=2)
gap = np.abs(dropin.attn_dw(xg, w_v, shared_dw) - out_full).max()
print(f"channel-shared depthwise vs folded full conv: max|diff| = {gap:.2e}")

# Ensembled: softmax(gamma) merges every head's projections into one.
gamma = np.zeros(cfg.n_h, dtype=np.float32)  # uniform mix to start
w_ve, w_oe = dropin.ensemble_weights(gamma, block.w_v, block.w_o, cfg.n_h, cfg.d_h)
k_e = seeded_fill((cfg.k, cfg.k, cfg.d_h), 23, "gaussian", 0.0, 1 / cfg.k)
out_ens = dropin.mhsa_dw_ensembled(x, w_ve, k_e, w_oe, cfg.m)
print(f"ensembled depthwise block output: {out_ens.shape}")

# Surgery: swap two heads of block 0 and keep the rest exact.
from dwdropin.select import SelectionPlan

plan = SelectionPlan(mode="scattered", order="lowest", budget=2,
                     targets=((0, 0), (0, 1)))
params = {0: dropin.BlockDropin(variant="dw", head_kernels={
    0: dropin.init_kernel("dw", cfg, 31), 1: dropin.init_kernel("dw", cfg, 32)})}
hybrid = dropin.replace_heads(model, plan, params)
base_out = vit.model_forward(x, model)
hyb_out = dropin.hybrid_forward(hybrid, x)
print(f"hybrid (2/{cfg.n_b * cfg.n_h} heads swapped, unfitted) vs baseline: "
      f"max|diff| = {np.abs(hyb_out - base_out).max():.3f}")

empty = dropin.replace_heads(model, SelectionPlan("blockwise", "lowest", 0, ()), {})
print("empty plan is a bitwise no-op:",
      bool((dropin.hybrid_forward(empty, x) == base_out).all()))
