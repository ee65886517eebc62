"""Walk one prediction back through a small transformer.

Builds a random two-layer model, attributes the last-position logit of a
short sequence to every block parameter, and prints where the relevance
landed and how well the total is conserved.

Run:
    python3 demos/relevance_walkthrough.py
"""

import numpy as np

from lrpcl.attribution import attribute
from lrpcl.importance import normalize_sample
from lrpcl.model import ModelConfig, forward, init_params

cfg = ModelConfig(n_layers=2, d_model=16, d_ff=32, n_heads=2, d_head=8, vocab_size=12, max_seq_len=16, seed=3)
params = init_params(cfg, std=0.3)
tokens = np.array([1, 4, 7, 2, 9, 5, 3])

trace = forward(params, tokens)
rmap = attribute(params, trace)
z = trace.Z[-1, trace.predicted]
print(f"predicted token {trace.predicted} with logit {z:.6f}")
print(f"relevance on parameters {rmap.parameter_sum():+.6f}, on the input embedding {rmap.input.sum():+.6f}")
print(f"conservation error {abs(rmap.conserved_sum() - z):.2e}")

# Per-tensor shares of the parameter relevance.
print("\nshare of |relevance| per tensor")
mass = {k: float(np.abs(v).sum()) for k, v in rmap.tensors.items()}
total = sum(mass.values())
for k, v in sorted(mass.items(), key=lambda kv: -kv[1]):
    print(f"  {k:14s} {v / total:6.1%}")

# Log-compressed, per-tensor scaled maps are what the importance prior aggregates.
norm = normalize_sample(rmap)
print("\nlargest normalized entries of block1.W_O:", np.sort(norm["block1.W_O"].ravel())[-5:].round(3))
