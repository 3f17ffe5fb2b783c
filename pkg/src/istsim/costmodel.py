"""Closed-form per-step traffic and FLOP counts for the training strategies.

Traffic counts the floats flowing into the sites, weights only. Data-parallel
broadcasts the full parameter set to each of the n sites every step. Subnet
training ships the endpoint matrices partitioned (each entry to exactly one
site) and a 1/n fraction of every middle matrix, once per J local steps.
FLOP counts are per site per gradient step (forward + backward matmuls).
"""

from __future__ import annotations

from dataclasses import dataclass

from .nn import ModelDims


@dataclass(frozen=True)
class CostQuery:
    dims: ModelDims
    n: int
    J: int = 1
    B: int = 1

    def __post_init__(self) -> None:
        if self.n < 1 or self.J < 1 or self.B < 1:
            raise ValueError("n, J and B must all be >= 1")


def _matrix_sizes(dims: ModelDims) -> list[int]:
    w = dims.widths
    return [w[l - 1] * w[l] for l in range(1, len(w))]


def _split_sizes(dims: ModelDims) -> tuple[int, int]:
    """(endpoint weight count, middle weight count)."""
    sizes = _matrix_sizes(dims)
    return sizes[0] + sizes[-1], sum(sizes[1:-1])


def dp_traffic_per_step(q: CostQuery) -> float:
    """Floats into sites per data-parallel step: n * sum_l N_{l-1} N_l."""
    return float(q.n * sum(_matrix_sizes(q.dims)))


def ist_traffic_per_step(q: CostQuery) -> float:
    """Floats into sites per subnet-training step, amortized over J.

    Endpoint matrices are partitioned across sites (each entry travels once);
    middle matrices contribute a 1/n fraction. One exchange every J steps.
    """
    endpoints, middle = _split_sizes(q.dims)
    return (endpoints + middle / q.n) / q.J


def dp_flops_per_step(q: CostQuery) -> float:
    """Per-site forward+backward matmul FLOPs per data-parallel step."""
    return float(4 * q.B * sum(_matrix_sizes(q.dims)))


def ist_flops_per_step(q: CostQuery) -> float:
    """Per-site forward+backward matmul FLOPs per subnet-training step."""
    endpoints, middle = _split_sizes(q.dims)
    return 4 * q.B * (endpoints + middle / q.n)


def emit_cost_sweep(
    dims: ModelDims, B: int, J: int, n_range: list[int]
) -> list[dict[str, float]]:
    """One row per cluster size n; feeds the cost-sweep CSV and figure."""
    if not n_range:
        raise ValueError("n_range must be nonempty")
    rows = []
    for n in n_range:
        q = CostQuery(dims, n=n, J=J, B=B)
        rows.append(
            {
                "n": n,
                "dp_traffic": dp_traffic_per_step(q),
                "ist_traffic": ist_traffic_per_step(q),
                "dp_flops": dp_flops_per_step(q),
                "ist_flops": ist_flops_per_step(q),
            }
        )
    return rows
