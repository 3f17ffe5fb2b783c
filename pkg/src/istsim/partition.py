"""Extract per-site weight shards from a model and put trained shards back.

Ownership layout per site s (mirroring how a parameter server would cut the
dense matrices):

  layer 1      rows of W^1 for s's layer-1 neurons, all input columns, + biases
  layers 2..t-1  W^l[rows: s's layer-l neurons, cols: s's layer-(l-1) neurons]
  layer t      all output rows, columns restricted to s's layer-(t-1) neurons

Weight entries are disjoint across sites by construction. Output biases cannot
be split, so every site carries a replica and reassembly averages them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .masks import MaskPlan, membership
from .nn import Layer, Model, ModelDims, StandardizerState


class PartitionError(ValueError):
    pass


class DegeneratePlanError(PartitionError):
    """Some site owns no neuron in some hidden layer."""


@dataclass(frozen=True)
class SubnetShard:
    site: int
    owned: tuple[np.ndarray, ...]  # per hidden layer, sorted owned neuron indices
    input_block: np.ndarray  # (|s_1|, N_0)
    input_bias: np.ndarray
    middle_blocks: tuple[np.ndarray, ...]  # (|s_l|, |s_{l-1}|) for l = 2..t-1
    middle_biases: tuple[np.ndarray, ...]
    output_block: np.ndarray  # (N_t, |s_{t-1}|)
    output_bias_copy: np.ndarray  # replica, not owned exclusively


def shard_float_count(shard: SubnetShard) -> int:
    """Exact number of 64-bit reals held by the shard (weights and biases)."""
    total = shard.input_block.size + shard.input_bias.size
    total += sum(b.size for b in shard.middle_blocks)
    total += sum(b.size for b in shard.middle_biases)
    total += shard.output_block.size + shard.output_bias_copy.size
    return total


def shard_weight_count(shard: SubnetShard) -> int:
    """Weight floats only; what the closed-form traffic formulas count."""
    return (
        shard.input_block.size
        + sum(b.size for b in shard.middle_blocks)
        + shard.output_block.size
    )


def extract_shards(model: Model, plan: MaskPlan) -> list[SubnetShard]:
    """Cut the model into one disjoint shard per site."""
    plan.validate(model.dims)
    t = model.dims.n_layers
    shards = []
    for site in range(plan.n_sites):
        owned = tuple(membership(plan, l, site) for l in range(1, t))
        for l, idx in enumerate(owned, start=1):
            if idx.size == 0:
                raise DegeneratePlanError(
                    f"site {site} owns no neuron in hidden layer {l}"
                )
        input_block = model.layers[0].weights[owned[0], :].copy()
        input_bias = model.layers[0].bias[owned[0]].copy()
        middle_blocks = []
        middle_biases = []
        for l in range(2, t):
            w = model.layers[l - 1].weights
            middle_blocks.append(w[np.ix_(owned[l - 1], owned[l - 2])].copy())
            middle_biases.append(model.layers[l - 1].bias[owned[l - 1]].copy())
        output_block = model.layers[t - 1].weights[:, owned[-1]].copy()
        output_bias_copy = model.layers[t - 1].bias.copy()
        shards.append(
            SubnetShard(
                site=site,
                owned=owned,
                input_block=input_block,
                input_bias=input_bias,
                middle_blocks=tuple(middle_blocks),
                middle_biases=tuple(middle_biases),
                output_block=output_block,
                output_bias_copy=output_bias_copy,
            )
        )
    return shards


def subnet_model(shard: SubnetShard, parent: Model) -> Model:
    """Materialize the shard as a standalone thin dense model.

    The subnet gets fresh batch-statistics standardizers: nothing learned is
    stored in them, so there is no state to ship back.
    """
    widths = (
        parent.dims.widths[0],
        *(idx.size for idx in shard.owned),
        parent.dims.widths[-1],
    )
    dims = ModelDims(widths)
    layers = [Layer(shard.input_block.copy(), shard.input_bias.copy())]
    for w, b in zip(shard.middle_blocks, shard.middle_biases):
        layers.append(Layer(w.copy(), b.copy()))
    layers.append(Layer(shard.output_block.copy(), shard.output_bias_copy.copy()))
    stands = tuple(
        StandardizerState.identity(w, mode="batch_stats") for w in dims.hidden
    )
    return Model(dims, tuple(layers), parent.activation, stands)


def shard_from_subnet(shard: SubnetShard, net: Model) -> SubnetShard:
    """Copy a trained subnet's parameters back into the shard's blocks."""
    t = net.dims.n_layers
    return replace(
        shard,
        input_block=net.layers[0].weights.copy(),
        input_bias=net.layers[0].bias.copy(),
        middle_blocks=tuple(net.layers[l - 1].weights.copy() for l in range(2, t)),
        middle_biases=tuple(net.layers[l - 1].bias.copy() for l in range(2, t)),
        output_block=net.layers[t - 1].weights.copy(),
        output_bias_copy=net.layers[t - 1].bias.copy(),
    )


def reassemble(model: Model, shards: list[SubnetShard], plan: MaskPlan) -> Model:
    """Write every shard's entries back into a copy of the model.

    Each weight entry has exactly one owner. The replicated output bias is set
    to the mean of the site copies, computed as base + mean(deltas) so that
    identical replicas reassemble bit-exactly.
    """
    plan.validate(model.dims)
    if len(shards) != plan.n_sites:
        raise PartitionError(
            f"expected {plan.n_sites} shards, got {len(shards)}"
        )
    t = model.dims.n_layers
    weights = [layer.weights.copy() for layer in model.layers]
    biases = [layer.bias.copy() for layer in model.layers]
    seen = set()
    for shard in shards:
        if shard.site in seen:
            raise PartitionError(f"duplicate shard for site {shard.site}")
        seen.add(shard.site)
        expected = tuple(membership(plan, l, shard.site) for l in range(1, t))
        for a, b in zip(shard.owned, expected):
            if not np.array_equal(a, b):
                raise PartitionError("shard ownership does not match plan")
        weights[0][shard.owned[0], :] = shard.input_block
        biases[0][shard.owned[0]] = shard.input_bias
        for l in range(2, t):
            weights[l - 1][np.ix_(shard.owned[l - 1], shard.owned[l - 2])] = (
                shard.middle_blocks[l - 2]
            )
            biases[l - 1][shard.owned[l - 1]] = shard.middle_biases[l - 2]
        weights[t - 1][:, shard.owned[-1]] = shard.output_block
    if seen != set(range(plan.n_sites)):
        raise PartitionError("missing shard")
    base = shards[0].output_bias_copy
    deltas = sum(s.output_bias_copy - base for s in shards)
    biases[t - 1] = base + deltas / plan.n_sites
    layers = tuple(Layer(w, b) for w, b in zip(weights, biases))
    return replace(model, layers=layers)
