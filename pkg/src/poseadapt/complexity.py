"""Analytic cost accounting over an ArchConfig: multiply-accumulates, output
activations, parameters, and parameter memory, without executing the network.

Counting conventions (chosen to reproduce the reference counting tool):
  - flops: one multiply-accumulate = 1 FLOP for conv/depthwise/dense layers;
    declared batch normalization costs 5 ops per output element; pooling and
    elementwise activation functions cost 0.
  - activations: sum of output element counts of conv/dense layers only.
  - params: weights + biases; convs lose their bias when normalization is
    declared, and each norm layer contributes its 2C affine parameters.
  - memory: params * 4 bytes (32-bit checkpoint convention), in MB (1e6).
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ArchConfig, ConfigError, get_profile, profile_names

BN_OPS_PER_ELEMENT = 5


@dataclass(frozen=True)
class LayerCost:
    path: str
    flops: int
    activations: int
    params: int

    @property
    def bytes(self) -> int:
        return self.params * 4


def _dense_cost(path: str, d_in: int, d_out: int) -> LayerCost:
    return LayerCost(path, flops=d_in * d_out, activations=d_out,
                     params=d_in * d_out + d_out)


def _conv_cost(path: str, c_in: int, c_out: int, k: int, h_out: int, w_out: int,
               batchnorm: bool) -> list[LayerCost]:
    out_elems = c_out * h_out * w_out
    layers = [LayerCost(path, flops=out_elems * c_in * k * k,
                        activations=out_elems,
                        params=c_out * c_in * k * k + (0 if batchnorm else c_out))]
    if batchnorm:
        layers.append(LayerCost(f"{path}.bn", flops=BN_OPS_PER_ELEMENT * out_elems,
                                activations=0, params=2 * c_out))
    return layers


def _dw_cost(path: str, c: int, k: int, h_out: int, w_out: int,
             batchnorm: bool) -> list[LayerCost]:
    out_elems = c * h_out * w_out
    layers = [LayerCost(path, flops=out_elems * k * k, activations=out_elems,
                        params=c * k * k + (0 if batchnorm else c))]
    if batchnorm:
        layers.append(LayerCost(f"{path}.bn", flops=BN_OPS_PER_ELEMENT * out_elems,
                                activations=0, params=2 * c))
    return layers


def _mlp_cost(prefix: str, d_in: int, d_hidden: int, d_out: int,
              hidden: bool) -> list[LayerCost]:
    if hidden:
        return [_dense_cost(f"{prefix}.fc1", d_in, d_hidden),
                _dense_cost(f"{prefix}.out", d_hidden, d_out)]
    return [_dense_cost(f"{prefix}.out", d_in, d_out)]


def profile(cfg: ArchConfig) -> tuple[list[LayerCost], LayerCost]:
    """Per-layer costs and their total for one sample through the network."""
    cfg.validate()
    layers: list[LayerCost] = []
    c_in = 3
    h, w = cfg.input_size
    for i, block in enumerate(cfg.blocks):
        tag = f"block{i}"
        p, k, s = block.pad(), block.kernel, block.stride
        h_out = (h + 2 * p - k) // s + 1
        w_out = (w + 2 * p - k) // s + 1
        if block.kind == "conv":
            layers += _conv_cost(f"{tag}.conv", c_in, block.out_channels, k,
                                 h_out, w_out, cfg.batchnorm)
        else:
            exp = block.expand
            if exp != c_in:
                layers += _conv_cost(f"{tag}.expand", c_in, exp, 1, h, w,
                                     cfg.batchnorm)
            layers += _dw_cost(f"{tag}.dw", exp, k, h_out, w_out, cfg.batchnorm)
            if block.kind == "se-bottleneck":
                sq = block.se_squeeze()
                layers.append(LayerCost(f"{tag}.se.pool", 0, 0, 0))
                layers.append(_dense_cost(f"{tag}.se.fc1", exp, sq))
                layers.append(_dense_cost(f"{tag}.se.fc2", sq, exp))
            layers += _conv_cost(f"{tag}.project", exp, block.out_channels, 1,
                                 h_out, w_out, cfg.batchnorm)
        c_in, h, w = block.out_channels, h_out, w_out

    c_f = c_in
    d, e = cfg.latent_dim, cfg.mha_embed
    layers.append(LayerCost("heads.gap", 0, 0, 0))
    layers += _mlp_cost("heads.enc_t", c_f, d, d, cfg.head_hidden)
    layers += _mlp_cost("heads.enc_r", c_f, d, d, cfg.head_hidden)
    layers += _mlp_cost("heads.translation", d, d, 3, cfg.head_hidden)
    layers += _mlp_cost("heads.value", d, d, e, cfg.head_hidden)
    layers.append(LayerCost("heads.smp", 0, 0, 0))
    layers.append(LayerCost("heads.sap", 0, 0, 0))
    # four e x e projections plus the score and weighted-sum products
    layers.append(LayerCost("heads.mha", flops=4 * e * e + 2 * e,
                            activations=4 * e, params=4 * (e * e + e)))
    layers += _mlp_cost("heads.rotation", e, d, 4, cfg.head_hidden)

    total = LayerCost("total",
                      flops=sum(l.flops for l in layers),
                      activations=sum(l.activations for l in layers),
                      params=sum(l.params for l in layers))
    return layers, total


def memory_mb(total: LayerCost) -> float:
    """Parameter footprint at 4 bytes each, rounded to 0.1 MB."""
    return round(total.bytes / 1e6, 1)


def summarize(total: LayerCost) -> dict[str, float]:
    return {
        "gflops": total.flops / 1e9,
        "params_m": total.params / 1e6,
        "activations_m": total.activations / 1e6,
        "memory_mb": memory_mb(total),
    }


def profile_named(name: str) -> tuple[list[LayerCost], LayerCost]:
    """Profile one of the built-in architecture profiles by name."""
    return profile(get_profile(name))


def mha_params(cfg: ArchConfig) -> int:
    e = cfg.mha_embed
    return 4 * (e * e + e)


def compare(names: list[str]) -> dict[tuple[str, str], dict[str, float]]:
    """Pairwise ratio matrix of flops/params/activations/bytes between profiles."""
    if not names:
        raise ConfigError("compare needs at least one profile name")
    totals = {name: profile_named(name)[1] for name in names}
    ratios = {}
    for a in names:
        for b in names:
            ratios[(a, b)] = {
                "flops": totals[a].flops / totals[b].flops,
                "params": totals[a].params / totals[b].params,
                "activations": totals[a].activations / totals[b].activations,
                "bytes": totals[a].bytes / totals[b].bytes,
            }
    return ratios


def layer_table(layers: list[LayerCost], total: LayerCost) -> str:
    lines = [f"{'layer':<24} {'flops':>14} {'acts':>12} {'params':>12}"]
    for l in layers:
        lines.append(f"{l.path:<24} {l.flops:>14d} {l.activations:>12d} {l.params:>12d}")
    lines.append(f"{'total':<24} {total.flops:>14d} {total.activations:>12d} "
                 f"{total.params:>12d}")
    return "\n".join(lines)


def summary_csv(names: list[str]) -> str:
    lines = ["profile,gflops,params_m,activations_m,memory_mb"]
    for name in names:
        s = summarize(profile_named(name)[1])
        lines.append(f"{name},{s['gflops']:.6f},{s['params_m']:.6f},"
                     f"{s['activations_m']:.6f},{s['memory_mb']:.1f}")
    return "\n".join(lines) + "\n"


def summary_table(names: list[str]) -> str:
    lines = [f"{'profile':<20} {'GFLOPs':>10} {'params(M)':>11} "
             f"{'acts(M)':>10} {'mem(MB)':>9}"]
    for name in names:
        s = summarize(profile_named(name)[1])
        lines.append(f"{name:<20} {s['gflops']:>10.4f} {s['params_m']:>11.4f} "
                     f"{s['activations_m']:>10.4f} {s['memory_mb']:>9.1f}")
    return "\n".join(lines)


__all__ = [
    "LayerCost", "profile", "profile_named", "summarize", "memory_mb",
    "mha_params", "compare", "layer_table", "summary_csv", "summary_table",
    "profile_names",
]
