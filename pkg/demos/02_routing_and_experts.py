"""The routing machinery up close: gate variants, sparse expert fusion, and
the exact-identity property of a freshly initialized network.

Run:  python3 demos/02_routing_and_experts.py
"""

import numpy as np

from drmc import tensor as T
from drmc.model import (
    DRMCNetwork,
    ModelConfig,
    _apply_gate,
    network_forward,
)
from drmc.tensor import Tensor


def main():
    logits = Tensor(np.float32([-1.0, 0.5, 2.0]))
    for gate in ("relu", "softmax", "top2"):
        w = _apply_gate(logits, gate)
        print(f"{gate:>8} gate on {logits.data}: {np.round(w.data, 4)}")
    print("note the exact zeros: zero-weight experts are never evaluated\n")

    # identity at initialization: the tail conv starts at zero, so the
    # network is a bitwise pass-through until the first optimizer step
    net = DRMCNetwork(ModelConfig(channels=8, n_experts=3, n_blocks=2), seed=0)
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(0, 1, (1, 8, 8, 8)).astype(np.float32))
    with T.no_grad():
        est, route_logs = network_forward(net, x)
    print(f"identity at init: {np.array_equal(est.data, x.data)}")
    print(f"routing decisions logged per forward pass: {len(route_logs)} "
          "(att + ffn for each block)")
    for i, w in enumerate(route_logs):
        layer, bank = i // 2, ("att", "ffn")[i % 2]
        print(f"  block {layer} {bank}: weights {np.round(w.data, 4)}")


if __name__ == "__main__":
    main()
