# What the boundary gate sees.
#
# The scar decoder is gated by the edge strength of the LA decoder features.
# On a blob the 3D Sobel magnitude lights up a thin shell around the surface
# and stays flat inside and outside, which is where scars live.

import numpy as np
import torch

from mdbanet.network import NetworkConfig, sfm
from mdbanet.phantom import oracle_convolve3d
from mdbanet.sobel import attention_map, make_sobel_kernels, sobel_response

ks = make_sobel_kernels()
print("kx centre line:", ks.kx[:, 1, 1], " sum:", ks.kx.sum())

# a ramp along x has gradient 1, the kernel weight is 2 * 16
ramp = np.arange(8.0)[:, None, None] * np.ones((1, 8, 8))
print("ramp response at the centre:", sobel_response(torch.as_tensor(ramp[None]))[0, 4, 4, 4].item())

# the same number from the brute-force loop
print("loop version:", oracle_convolve3d(ramp, ks.kx)[4, 4, 4])

# a soft ball as a stand-in for LA features
g = np.mgrid[:16, :16, :16] - 7.5
r = np.sqrt((g ** 2).sum(0))
ball = 1 / (1 + np.exp(r - 5))
edge = sobel_response(torch.as_tensor(ball[None]))[0].numpy()
for radius in (1, 3, 5, 7, 10):
    shell = np.abs(r - radius) < 0.7
    print("radius %2d  mean edge %.3f" % (radius, edge[shell].mean()))

gate = attention_map(torch.as_tensor(edge), "sigmoid")
print("sigmoid gate range: %.3f .. %.3f" % (gate.min().item(), gate.max().item()))

# the fusion block: gated scar features next to the encoder skip
dec = torch.randn(4, 16, 16, 16, dtype=torch.float64)
enc = torch.randn(4, 16, 16, 16, dtype=torch.float64)
la = torch.as_tensor(np.repeat(ball[None], 4, 0))
for mode in ("sobel", "multiply", "none"):
    out = sfm(dec, la if mode != "none" else None, enc,
              NetworkConfig(fusion_mode=mode, la_branch=mode != "none"))
    print("%-8s -> %d channels, gated/raw ratio at centre %.3f, near wall %.3f"
          % (mode, out.shape[0], (out[0, 8, 8, 8] / dec[0, 8, 8, 8]).item(),
             (out[0, 8, 8, 13] / dec[0, 8, 8, 13]).item()))

# a flat LA map gives no edges: raw mode shuts the gate, sigmoid halves it
flat = torch.full_like(dec, 0.3)
raw = sfm(dec, flat, enc, NetworkConfig(attention_mode="raw"))
sig = sfm(dec, flat, enc, NetworkConfig(attention_mode="sigmoid"))
print("flat LA: raw max |gated| =", raw[:4].abs().max().item(),
      " sigmoid gated/dec =", (sig[:4] / dec).mean().item())
