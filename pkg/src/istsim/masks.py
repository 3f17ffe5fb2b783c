"""Membership sampling: assign each hidden neuron to exactly one site.

Two strategies: "iid" draws every neuron's site uniformly and independently,
matching the probabilistic moment model (marginal 1/n, cross-layer product
1/n^2) but allowing empty subnets; "balanced" splits a random permutation into
near-equal contiguous blocks and is the training default. Input and output
layers are never masked by training plans; an optional input-layer assignment
exists solely for the estimator-unbiasedness study.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nn import ModelDims


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    n_sites: int
    # assignments[k] covers hidden layer k+1; values in {0..n_sites-1}
    assignments: tuple[np.ndarray, ...]
    strategy: str
    seed: int
    input_assignment: np.ndarray | None = None

    @property
    def n_hidden(self) -> int:
        return len(self.assignments)

    def validate(self, dims: ModelDims) -> None:
        if self.n_hidden != dims.n_layers - 1:
            raise ConfigError(
                f"plan covers {self.n_hidden} hidden layers, model has {dims.n_layers - 1}"
            )
        for k, a in enumerate(self.assignments):
            if a.shape != (dims.hidden[k],):
                raise ConfigError(f"assignment {k + 1} has shape {a.shape}")
            if a.min() < 0 or a.max() >= self.n_sites:
                raise ConfigError("site index out of range")
        if self.input_assignment is not None and self.input_assignment.shape != (
            dims.widths[0],
        ):
            raise ConfigError("input assignment does not match input width")

    def to_json(self) -> str:
        payload = {
            "n_sites": self.n_sites,
            "strategy": self.strategy,
            "seed": self.seed,
            "assignments": {
                str(k + 1): a.tolist() for k, a in enumerate(self.assignments)
            },
            "input_assignment": None
            if self.input_assignment is None
            else self.input_assignment.tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MaskPlan":
        payload = json.loads(text)
        keys = sorted(payload["assignments"], key=int)
        assignments = tuple(
            np.asarray(payload["assignments"][k], dtype=np.int64) for k in keys
        )
        inp = payload.get("input_assignment")
        return MaskPlan(
            n_sites=int(payload["n_sites"]),
            assignments=assignments,
            strategy=payload["strategy"],
            seed=int(payload["seed"]),
            input_assignment=None if inp is None else np.asarray(inp, dtype=np.int64),
        )


def _balanced_assignment(rng: np.random.Generator, width: int, n: int) -> np.ndarray:
    # Random permutation cut into contiguous blocks whose sizes differ by <= 1.
    perm = rng.permutation(width)
    base, rem = divmod(width, n)
    out = np.empty(width, dtype=np.int64)
    start = 0
    for s in range(n):
        size = base + (1 if s < rem else 0)
        out[perm[start : start + size]] = s
        start += size
    return out


def sample_plan(
    dims: ModelDims,
    n: int,
    strategy: str = "balanced",
    seed: int = 0,
    include_input: bool = False,
) -> MaskPlan:
    """Sample one membership plan for every hidden layer.

    include_input additionally assigns input features to sites (needed by the
    masked-estimate unbiasedness study, never by training).
    """
    if n < 1:
        raise ConfigError("need at least one site")
    if strategy not in ("iid", "balanced"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    if strategy == "balanced":
        for w in dims.hidden:
            if w < n:
                raise ConfigError(
                    f"balanced plans need every hidden width >= n; got width {w} < {n}"
                )
    rng = np.random.default_rng(seed)

    def draw(width: int) -> np.ndarray:
        if strategy == "iid":
            return rng.integers(0, n, size=width, dtype=np.int64)
        return _balanced_assignment(rng, width, n)

    input_assignment = draw(dims.widths[0]) if include_input else None
    assignments = tuple(draw(w) for w in dims.hidden)
    return MaskPlan(n, assignments, strategy, seed, input_assignment)


def membership(plan: MaskPlan, layer: int, site: int) -> np.ndarray:
    """Sorted neuron indices of hidden `layer` (1-indexed) owned by `site`."""
    if not 1 <= layer <= plan.n_hidden:
        raise ConfigError(f"layer {layer} out of range 1..{plan.n_hidden}")
    if not 0 <= site < plan.n_sites:
        raise ConfigError(f"site {site} out of range 0..{plan.n_sites - 1}")
    return np.flatnonzero(plan.assignments[layer - 1] == site)


@dataclass(frozen=True)
class MaskMoments:
    """Empirical mask moments over independently sampled iid plans.

    marginals[l][s]: mean of the site-s indicator over all neurons of hidden
    layer l and all sampled plans (target 1/n). products[(l, l+1)][s]: mean of
    the co-location indicator of neuron 0 in each of the two adjacent hidden
    layers at site s, over plans (target 1/n^2).
    """

    n_sites: int
    samples: int
    marginals: dict[int, np.ndarray]
    marginal_draws: dict[int, int]
    products: dict[tuple[int, int], np.ndarray]

    def to_json(self) -> str:
        payload = {
            "n_sites": self.n_sites,
            "samples": self.samples,
            "marginals": {str(k): v.tolist() for k, v in self.marginals.items()},
            "marginal_draws": {str(k): v for k, v in self.marginal_draws.items()},
            "products": {f"{a},{b}": v.tolist() for (a, b), v in self.products.items()},
        }
        return json.dumps(payload, sort_keys=True)


def moment_report(dims: ModelDims, n: int, samples: int, seed: int = 0) -> MaskMoments:
    """Sample `samples` independent iid plans and report empirical moments."""
    if samples < 1:
        raise ConfigError("need at least one sample")
    if n < 1:
        raise ConfigError("need at least one site")
    rng = np.random.default_rng(seed)
    # (samples, width) site draws per hidden layer, all plans at once.
    draws = {
        l: rng.integers(0, n, size=(samples, w), dtype=np.int64)
        for l, w in enumerate(dims.hidden, start=1)
    }
    marginals = {}
    marginal_draws = {}
    for l, a in draws.items():
        marginals[l] = np.array([(a == s).mean() for s in range(n)])
        marginal_draws[l] = a.size
    products = {}
    hidden_layers = sorted(draws)
    for l in hidden_layers[:-1]:
        lo, hi = draws[l][:, 0], draws[l + 1][:, 0]
        products[(l, l + 1)] = np.array(
            [((lo == s) & (hi == s)).mean() for s in range(n)]
        )
    return MaskMoments(n, samples, marginals, marginal_draws, products)
