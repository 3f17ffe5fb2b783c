"""Independent subnet training over a simulated multi-worker cluster.

Library layout: nn (dense nets + manual backprop), masks (membership
sampling), partition (shard extract/reassemble), cluster (strategy runners
with exact communication ledgers), costmodel (closed-form traffic/FLOPs),
gdci (compressed-iterates verification), data / report / cli (harness).
"""

__version__ = "0.1.0"
