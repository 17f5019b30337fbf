"""Shared-weight super-net over a cell search space.

One network holds parameters for every op site in the space; forward_path
runs a single architecture through it. Widths: the stem and every cell
boundary carry macro.init_channels (C) channels. In dynamic-channel spaces
an architecture whose output node has in-degree k runs its intermediate
nodes at floor(C / k) channels, realized by slicing the allocated weights
with the configured channel strategy. Merges renormalize widths: a j-input
concat targeting width W slices every input to floor(W / j), concatenates,
and zero-pads to W; sum merges require equal widths.

Stand-alone networks and per-sub-space super-nets are the same machinery
with channel_strategy="disabled" (constant intermediate width, no slicing),
so their forwards agree bitwise with the shared builder at equal seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .nncore import BNState, ParamStore, Tape, Value, named_rng
from .searchspace import CellEncoding, SearchSpaceSpec, validate_encoding

CHANNEL_STRATEGIES = ("fixed_chunk", "shuffle", "interpolate", "disabled")
PARAMETRIC_OPS = ("conv3x3", "conv1x1")


@dataclass(frozen=True)
class MacroParams:
    """Network skeleton around the searched cells."""

    init_channels: int = 8
    num_layers: int = 2       # stacks, each with its own parameter set
    repeated_cells: int = 1   # cells per stack sharing that set
    num_classes: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.init_channels < 1 or self.num_layers < 1 or self.repeated_cells < 1:
            raise ValueError("macro dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    def to_dict(self) -> dict:
        return {
            "init_channels": self.init_channels,
            "num_layers": self.num_layers,
            "repeated_cells": self.repeated_cells,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MacroParams":
        known = {"init_channels", "num_layers", "repeated_cells", "num_classes", "in_channels"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown macro keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class SuperNetConfig:
    """Weight-sharing factors under study."""

    channel_strategy: str = "fixed_chunk"
    dynamic_channel_train: bool = True
    dynamic_channel_test: bool = True
    fixed_k: int | None = None          # required by channel_strategy="disabled"
    wsbn: bool = False
    path_dropout: float = 0.0
    global_dropout: float = 0.0
    ofa_kernel: bool = False

    def __post_init__(self):
        if self.channel_strategy not in CHANNEL_STRATEGIES:
            raise ValueError(f"unknown channel_strategy {self.channel_strategy!r}")
        if self.channel_strategy == "disabled" and self.fixed_k is None:
            raise ValueError("channel_strategy=disabled needs fixed_k (a fixed-in-degree sub-space)")
        if self.channel_strategy != "disabled" and self.fixed_k is not None:
            raise ValueError("fixed_k only applies to channel_strategy=disabled")
        if not 0.0 <= self.path_dropout < 1.0 or not 0.0 <= self.global_dropout < 1.0:
            raise ValueError("dropout rates must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "channel_strategy": self.channel_strategy,
            "dynamic_channel_train": self.dynamic_channel_train,
            "dynamic_channel_test": self.dynamic_channel_test,
            "fixed_k": self.fixed_k,
            "wsbn": self.wsbn,
            "path_dropout": self.path_dropout,
            "global_dropout": self.global_dropout,
            "ofa_kernel": self.ofa_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SuperNetConfig":
        known = {
            "channel_strategy",
            "dynamic_channel_train",
            "dynamic_channel_test",
            "fixed_k",
            "wsbn",
            "path_dropout",
            "global_dropout",
            "ofa_kernel",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown supernet keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PathSelection:
    """The parameter subset theta_i one architecture touches."""

    arch: CellEncoding
    width: int
    keys: tuple[str, ...]


@dataclass
class SuperNet:
    spec: SearchSpaceSpec
    macro: MacroParams
    config: SuperNetConfig
    store: ParamStore
    bn_states: dict[str, BNState]
    seed: int
    bn_affine: bool
    bn_track: bool
    restricted_to: CellEncoding | None = None
    _step_counter: int = field(default=0, repr=False)

    @property
    def alloc_width(self) -> int:
        c = self.macro.init_channels
        if self.config.channel_strategy == "disabled":
            return max(1, c // self.config.fixed_k)
        return c

    def check_arch(self, enc: CellEncoding) -> None:
        reasons = validate_encoding(self.spec, enc)
        if reasons:
            raise ValueError(f"invalid architecture for this space: {reasons}")
        if self.config.channel_strategy == "disabled" and enc.output_in_degree() != self.config.fixed_k:
            raise ValueError(
                f"sub-space super-net expects output in-degree {self.config.fixed_k}, "
                f"got {enc.output_in_degree()}"
            )
        if self.restricted_to is not None and enc != self.restricted_to:
            raise ValueError("stand-alone network only runs its own architecture")


# -------------------------------------------------------------- site names

def _site(stack: int, spec: SearchSpaceSpec, where) -> str:
    if spec.op_placement == "node":
        return f"stack{stack}/node{where}"
    u, v = where
    return f"stack{stack}/edge{u}-{v}"


def _wsbn_key(stack: int, v: int, u: int) -> str:
    return f"stack{stack}/wsbn/node{v}/from{u}/bn"


def _possible_preds(spec: SearchSpaceSpec, v: int) -> list[int]:
    """Nodes that may feed v (input->output is never representable)."""
    preds = list(range(v))
    if v == spec.output_node and 0 in preds:
        preds.remove(0)
    return preds


def _site_wheres(spec: SearchSpaceSpec):
    if spec.op_placement == "node":
        return list(range(1, spec.n_nodes + 1))
    return list(spec.possible_edges())


# ----------------------------------------------------------------- builder

def build_supernet(
    spec: SearchSpaceSpec,
    macro: MacroParams,
    config: SuperNetConfig,
    seed: int,
    bn_affine: bool = True,
    bn_track: bool = False,
    bn_momentum: float = 0.9,
    bn_eps: float = 1e-5,
    dtype=np.float32,
    restrict_to: CellEncoding | None = None,
) -> SuperNet:
    """Allocate every op site of the space (or of one architecture).

    Parameter init is keyed by (seed, parameter name), so any two builds
    that share a key agree on its initial value regardless of what else
    they allocate.
    """
    if config.ofa_kernel and not ("conv3x3" in spec.ops and "conv1x1" in spec.ops):
        raise ValueError("ofa_kernel needs both conv3x3 and conv1x1 in the vocabulary")
    store = ParamStore(seed=seed, dtype=dtype)
    bn_states: dict[str, BNState] = {}
    c = macro.init_channels

    def new_bn(key: str, channels: int) -> None:
        state = BNState(key, channels, affine=bn_affine, track=bn_track, momentum=bn_momentum, eps=bn_eps)
        state.create_params(store)
        bn_states[key] = state

    store.create("stem/conv/weight", (c, macro.in_channels, 3, 3), init="normal", fan_in=macro.in_channels * 9)
    new_bn("stem/bn", c)

    sn = SuperNet(spec, macro, config, store, bn_states, seed, bn_affine, bn_track, restricted_to=restrict_to)
    width = sn.alloc_width

    def active_ops(where) -> list[str]:
        if restrict_to is None:
            return list(spec.ops)
        if spec.op_placement == "node":
            return [spec.ops[restrict_to.ops[where - 1]]]
        if where in restrict_to.edges:
            return [spec.ops[restrict_to.edge_op(where)]]
        return []

    def active_wheres():
        if restrict_to is None or spec.op_placement == "node":
            return _site_wheres(spec)
        return list(restrict_to.edges)

    for stack in range(macro.num_layers):
        for where in active_wheres():
            site = _site(stack, spec, where)
            ops_here = active_ops(where)
            if config.ofa_kernel and any(op in PARAMETRIC_OPS for op in ops_here):
                store.create(f"{site}/conv3x3/weight", (width, width, 3, 3), init="normal", fan_in=width * 9)
                store.create(f"{site}/ofa_proj", (width, width), init="identity")
                if not config.wsbn:
                    for op in ops_here:
                        if op in PARAMETRIC_OPS:
                            new_bn(f"{site}/{op}/bn", width)
            else:
                for op in ops_here:
                    if op == "conv3x3":
                        store.create(f"{site}/conv3x3/weight", (width, width, 3, 3), init="normal", fan_in=width * 9)
                    elif op == "conv1x1":
                        store.create(f"{site}/conv1x1/weight", (width, width), init="normal", fan_in=width)
                    if op in PARAMETRIC_OPS and not config.wsbn:
                        new_bn(f"{site}/{op}/bn", width)
        if config.wsbn:
            for v in range(1, spec.output_node + 1):
                preds = _possible_preds(spec, v)
                if restrict_to is not None:
                    preds = [u for u in preds if (u, v) in restrict_to.edges]
                for u in preds:
                    new_bn(_wsbn_key(stack, v, u), c)

    store.create("classifier/weight", (c, macro.num_classes), init="normal", fan_in=c)
    store.create("classifier/bias", (macro.num_classes,), init="zeros")
    return sn


def build_standalone(
    spec: SearchSpaceSpec,
    enc: CellEncoding,
    macro: MacroParams,
    seed: int,
    bn_affine: bool = True,
    bn_track: bool = True,
    bn_momentum: float = 0.9,
    bn_eps: float = 1e-5,
    dtype=np.float32,
) -> SuperNet:
    """Fixed-channel network for a single architecture (no sharing)."""
    reasons = validate_encoding(spec, enc)
    if reasons:
        raise ValueError(f"invalid architecture: {reasons}")
    k = enc.output_in_degree() if spec.channel_mode == "dynamic" else None
    config = SuperNetConfig(
        channel_strategy="disabled" if k is not None else "fixed_chunk",
        dynamic_channel_train=False,
        dynamic_channel_test=False,
        fixed_k=k,
    )
    return build_supernet(
        spec, macro, config, seed,
        bn_affine=bn_affine, bn_track=bn_track, bn_momentum=bn_momentum, bn_eps=bn_eps,
        dtype=dtype, restrict_to=enc,
    )


# ------------------------------------------------------------ path queries

def path_width(sn: SuperNet, enc: CellEncoding, train: bool) -> int:
    """Intermediate-node width this architecture runs at in this phase."""
    if sn.spec.channel_mode != "dynamic":
        return sn.macro.init_channels
    if sn.config.channel_strategy == "disabled":
        return sn.alloc_width
    dynamic = sn.config.dynamic_channel_train if train else sn.config.dynamic_channel_test
    if not dynamic:
        return sn.alloc_width
    return max(1, sn.macro.init_channels // enc.output_in_degree())


def select_path(sn: SuperNet, enc: CellEncoding, train: bool = True) -> PathSelection:
    """Trainable parameter keys touched by one architecture's forward."""
    sn.check_arch(enc)
    spec = sn.spec
    keys: set[str] = {"stem/conv/weight", "classifier/weight", "classifier/bias"}
    if sn.bn_affine:
        keys.update({"stem/bn/scale", "stem/bn/shift"})

    def add_bn(key: str) -> None:
        if sn.bn_affine:
            keys.update({key + "/scale", key + "/shift"})

    for stack in range(sn.macro.num_layers):
        if spec.op_placement == "node":
            actives = [(v, spec.ops[enc.ops[v - 1]]) for v in range(1, spec.n_nodes + 1)]
        else:
            actives = [(e, spec.ops[enc.edge_op(e)]) for e in enc.edges]
        for where, op in actives:
            site = _site(stack, spec, where)
            if op == "conv3x3":
                keys.add(f"{site}/conv3x3/weight")
            elif op == "conv1x1":
                if sn.config.ofa_kernel:
                    keys.add(f"{site}/conv3x3/weight")
                    keys.add(f"{site}/ofa_proj")
                else:
                    keys.add(f"{site}/conv1x1/weight")
            if op in PARAMETRIC_OPS and not sn.config.wsbn:
                add_bn(f"{site}/{op}/bn")
        if sn.config.wsbn:
            for u, v in enc.edges:
                add_bn(_wsbn_key(stack, v, u))
    return PathSelection(arch=enc, width=path_width(sn, enc, train), keys=tuple(sorted(keys)))


# ---------------------------------------------------------------- slicing

def interpolation_matrix(c_max: int, c: int) -> np.ndarray:
    """Moving-average resampling map: row j averages its source window."""
    if c > c_max:
        raise ValueError(f"cannot interpolate {c_max} channels up to {c}")
    mat = np.zeros((c, c_max), dtype=np.float64)
    for j in range(c):
        lo = (j * c_max) // c
        hi = ((j + 1) * c_max) // c
        mat[j, lo:hi] = 1.0 / (hi - lo)
    return mat


def _slice_axis(v: Value, c: int, axis: int, strategy: str, rng: np.random.Generator | None) -> Value:
    full = v.data.shape[axis]
    if full == c:
        return v
    if full < c:
        raise ValueError(f"cannot widen axis {axis} from {full} to {c}")
    if strategy in ("fixed_chunk", "disabled"):
        return nn.take_axis(v, np.arange(c), axis)
    if strategy == "shuffle":
        if rng is None:
            raise ValueError("shuffle strategy needs an rng")
        return nn.take_axis(v, rng.permutation(full)[:c], axis)
    if strategy == "interpolate":
        return nn.mix_axis(v, interpolation_matrix(full, c), axis)
    raise ValueError(f"unknown channel strategy {strategy!r}")


def _slice_activation(v: Value, c: int, strategy: str, rng) -> Value:
    return _slice_axis(v, c, 1, strategy, rng)


def _slice_weight_2d(v: Value, c_out: int, c_in: int, strategy: str, rng) -> Value:
    return _slice_axis(_slice_axis(v, c_out, 0, strategy, rng), c_in, 1, strategy, rng)


# ----------------------------------------------------------------- forward

def _merge(sn: SuperNet, tensors: list[Value], target: int, rng) -> Value:
    """Merge incoming tensors to `target` channels by the spec's rule."""
    rule = sn.spec.merge_rule
    strategy = sn.config.channel_strategy
    if rule == "sum":
        for t in tensors:
            if t.data.shape[1] != target:
                raise ValueError(
                    f"sum merge requires equal channel counts, got {t.data.shape[1]} vs {target}"
                )
        return tensors[0] if len(tensors) == 1 else nn.sum_tensors(tensors)
    chunk = max(1, target // len(tensors))
    pieces = [_slice_activation(t, min(chunk, t.data.shape[1]), strategy, rng) for t in tensors]
    merged = pieces[0] if len(pieces) == 1 else nn.concat_channels(pieces)
    return nn.channel_pad(merged, target)


def _apply_op(
    sn: SuperNet,
    tape: Tape,
    site: str,
    op: str,
    x: Value,
    width: int,
    train: bool,
    bn_mode: str,
    rng,
) -> Value:
    strategy = sn.config.channel_strategy
    if op == "zero":
        return nn.zero_op(x)
    if op == "identity":
        return x
    if op == "avgpool3x3":
        return nn.avgpool3x3(x)
    if op == "conv3x3":
        w = tape.param(f"{site}/conv3x3/weight")
        if width < sn.alloc_width:
            w = _slice_axis(_slice_axis(w, width, 0, strategy, rng), width, 1, strategy, rng)
        y = nn.conv3x3(x, w)
    elif op == "conv1x1":
        if sn.config.ofa_kernel:
            w3 = tape.param(f"{site}/conv3x3/weight")
            proj = tape.param(f"{site}/ofa_proj")
            center = nn.reshape(
                nn.take_axis(nn.take_axis(w3, np.array([1]), 2), np.array([1]), 3),
                (w3.data.shape[0], w3.data.shape[1]),
            )
            w = nn.matmul2d(proj, center)
        else:
            w = tape.param(f"{site}/conv1x1/weight")
        if width < sn.alloc_width:
            w = _slice_weight_2d(w, width, width, strategy, rng)
        y = nn.conv1x1(x, w)
    else:
        raise ValueError(f"unknown op {op!r}")
    if not sn.config.wsbn:
        y = nn.batchnorm(y, sn.bn_states[f"{site}/{op}/bn"], train=train, bn_mode=bn_mode)
    return nn.relu(y)


def _cell_forward(
    sn: SuperNet,
    tape: Tape,
    stack: int,
    enc: CellEncoding,
    cell_in: Value,
    width: int,
    train: bool,
    bn_mode: str,
    rng,
) -> Value:
    spec = sn.spec
    c_out = sn.macro.init_channels
    drop = sn.config.path_dropout if train else 0.0
    tensors: dict[int, Value] = {0: cell_in}

    def incoming(v: int) -> list[Value]:
        contributions = []
        for u, _ in enc.in_edges(v):
            t = tensors[u]
            if spec.op_placement == "edge":
                site = _site(stack, spec, (u, v))
                t = _apply_op(sn, tape, site, spec.ops[enc.edge_op((u, v))], t, width, train, bn_mode, rng)
            if sn.config.wsbn:
                t = nn.batchnorm(t, sn.bn_states[_wsbn_key(stack, v, u)], train=train, bn_mode=bn_mode)
            if drop > 0.0:
                keep = np.float32(1.0 / (1.0 - drop)) if rng.random() >= drop else np.float32(0.0)
                t = nn.scale_channels(t, keep)
            contributions.append(t)
        return contributions

    for v in range(1, spec.n_nodes + 1):
        ins = incoming(v)
        if not ins:
            raise ValueError(f"node {v} has no inputs (invalid architecture)")
        merged = _merge(sn, ins, width, rng)
        if spec.op_placement == "node":
            site = _site(stack, spec, v)
            merged = _apply_op(sn, tape, site, spec.ops[enc.ops[v - 1]], merged, width, train, bn_mode, rng)
        tensors[v] = merged

    out_ins = incoming(spec.output_node)
    if not out_ins:
        raise ValueError("output node has no inputs (invalid architecture)")
    return _merge(sn, out_ins, c_out, rng)


def forward_path(
    sn: SuperNet,
    enc: CellEncoding,
    x: np.ndarray,
    train: bool = True,
    bn_mode: str = "batch",
    rng: np.random.Generator | None = None,
) -> tuple[Value, Tape]:
    """Run one architecture through the shared weights.

    Returns (logits, tape); tape.param_keys() lists the touched parameters.
    An rng is required when the forward is stochastic (dropout in train
    mode, or the shuffle channel strategy).
    """
    sn.check_arch(enc)
    needs_rng = sn.config.channel_strategy == "shuffle" or (
        train and (sn.config.path_dropout > 0.0 or sn.config.global_dropout > 0.0)
    )
    if needs_rng and rng is None:
        raise ValueError("this configuration needs an rng for forward_path")
    tape = Tape(sn.store)
    h = nn.conv3x3(tape.input(x), tape.param("stem/conv/weight"))
    h = nn.batchnorm(h, sn.bn_states["stem/bn"], train=train, bn_mode=bn_mode)
    h = nn.relu(h)
    width = path_width(sn, enc, train)
    for stack in range(sn.macro.num_layers):
        for _ in range(sn.macro.repeated_cells):
            h = _cell_forward(sn, tape, stack, enc, h, width, train, bn_mode, rng)
    if train and sn.config.global_dropout > 0.0:
        h = nn.mul_mask(h, nn.dropout_mask(rng, h.data.shape, sn.config.global_dropout))
    pooled = nn.global_pool(h)
    logits = nn.linear(pooled, tape.param("classifier/weight"), tape.param("classifier/bias"))
    return logits, tape


def path_loss(
    sn: SuperNet,
    enc: CellEncoding,
    x: np.ndarray,
    y: np.ndarray,
    train: bool = True,
    bn_mode: str = "batch",
    rng: np.random.Generator | None = None,
) -> tuple[Value, Tape]:
    logits, tape = forward_path(sn, enc, x, train=train, bn_mode=bn_mode, rng=rng)
    return nn.cross_entropy(logits, y), tape


def mean_path_loss(
    sn: SuperNet,
    encs: list[CellEncoding],
    x: np.ndarray,
    y: np.ndarray,
    bn_mode: str = "batch",
) -> float:
    """Mean per-path loss on frozen weights (eval mode, no updates)."""
    if not encs:
        raise ValueError("no architectures given")
    total = 0.0
    for enc in encs:
        loss, _ = path_loss(sn, enc, x, y, train=False, bn_mode=bn_mode)
        total += float(loss.data)
    return total / len(encs)


def path_param_count(sn: SuperNet, enc: CellEncoding) -> int:
    """Number of scalar parameters the architecture's forward touches."""
    selection = select_path(sn, enc)
    return int(sum(np.prod(sn.store.get(k).shape) for k in selection.keys))


def checkpoint_header(sn: SuperNet) -> str:
    """Canonical text header stored with super-net checkpoints."""
    import json

    payload = {
        "spec": sn.spec.to_dict(),
        "macro": sn.macro.to_dict(),
        "config": sn.config.to_dict(),
        "bn_affine": sn.bn_affine,
        "bn_track": sn.bn_track,
        "seed": sn.seed,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))
