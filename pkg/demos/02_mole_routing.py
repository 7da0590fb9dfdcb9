"""Top-1 routing and the load-balancing loss.

A router picks one LoRA expert per token. Expert outputs start at zero (B = 0)
so attaching the layer changes nothing. The balancing loss is 1 when tokens
split evenly and 2 when every token goes to one of two experts.
"""

import numpy as np

from speechground.mole import MoleLayer, RoutingStats, load_balance_loss, mole_ffn_forward, route
from speechground.numerics import FeedForward, ffn_forward

rng = np.random.default_rng(0)
d, hidden = 8, 16
host = FeedForward(rng.normal(size=(hidden, d)), np.zeros(hidden), rng.normal(size=(d, hidden)), np.zeros(d))
layer = MoleLayer.init(d, hidden, n_experts=2, rank=4, lora_alpha=4.0, rng=rng)

x = rng.normal(size=(32, d))
same = np.array_equal(mole_ffn_forward(layer, host, x), ffn_forward(host, x)[0])
print("freshly attached MoLE reproduces the host FFN bit for bit:", same)
print("routing fractions over 32 tokens:", layer.stats.fractions().round(3))
print("balancing loss of this batch:", round(load_balance_loss(layer.stats), 4))

k, p = route(layer.router, x[0])
print(f"token 0 goes to expert {k} with gate probabilities {p.round(3)}")

print("uniform split  ->", load_balance_loss(RoutingStats(2, np.array([5, 5]), np.array([5.0, 5.0]))))
print("full collapse  ->", load_balance_loss(RoutingStats(2, np.array([10, 0]), np.array([10.0, 0.0]))))
