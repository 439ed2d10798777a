"""Low-parameter vision backbones and the projection head.

Networks are built as closures over a ParameterSet: construction registers
named float32 arrays and returns a forward function that maps a tensor dict
(name -> autograd Tensor) plus an input batch to embeddings or logits. The
same network runs on multiple input resolutions (fully convolutional;
attention patching adapts to the feature-map side).

Conv blocks use group normalization and SiLU, transformer layers use layer
normalization and GELU, so a batch of one is exact and results do not depend
on batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ParameterSet:
    """Ordered name -> float array map; the unit of EMA and checkpointing."""

    def __init__(self, version: int = 1):
        self.entries: dict[str, np.ndarray] = {}
        self.version = version

    def add(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name: {name}")
        self.entries[name] = array
        return array

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        old = self.entries[name]
        if old.shape != value.shape:
            raise ValueError(
                f"parameter {name}: shape {value.shape} does not match fixed shape {old.shape}"
            )
        self.entries[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def items(self):
        return self.entries.items()

    def copy(self) -> "ParameterSet":
        ps = ParameterSet(version=self.version)
        for name, arr in self.entries.items():
            ps.entries[name] = arr.copy()
        return ps

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in self.entries.items()}

    def subset(self, prefix: str) -> "ParameterSet":
        """New ParameterSet holding only entries under `prefix.` (names kept)."""
        ps = ParameterSet(version=self.version)
        dot = prefix + "."
        for name, arr in self.entries.items():
            if name.startswith(dot):
                ps.entries[name] = arr
        return ps


def count_params(ps: ParameterSet) -> int:
    """Total scalar count: sum over entries of shape products."""
    return int(sum(arr.size for arr in ps.entries.values()))


# Forward functions take (tensors, x) and return a Tensor.
ForwardFn = Callable[[dict[str, Tensor], Tensor], Tensor]


# Initializers ----------------------------------------------------------


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, scale: float = 1.0) -> np.ndarray:
    std = scale * np.sqrt(2.0 / fan_in)
    return (rng.normal(0.0, std, size=shape)).astype(np.float32)


def _gn_groups(channels: int) -> int:
    # Largest divisor of the channel count not exceeding 8.
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


# Layer builders ---------------------------------------------------------


def _conv(ps, rng, name, cin, cout, k, stride=1, bias=True) -> ForwardFn:
    ps.add(f"{name}.w", _he_normal(rng, (cout, cin, k, k), fan_in=cin * k * k))
    if bias:
        ps.add(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def fwd(t, x):
        return ag.conv2d(x, t[f"{name}.w"], t[f"{name}.b"] if bias else None, stride=stride)

    return fwd


def _dwconv(ps, rng, name, c, k, stride=1) -> ForwardFn:
    ps.add(f"{name}.w", _he_normal(rng, (c, k, k), fan_in=k * k))

    def fwd(t, x):
        return ag.depthwise_conv2d(x, t[f"{name}.w"], None, stride=stride)

    return fwd


def _linear(ps, rng, name, din, dout, bias=True, w_scale=1.0) -> ForwardFn:
    ps.add(f"{name}.w", _he_normal(rng, (din, dout), fan_in=din, scale=w_scale))
    if bias:
        ps.add(f"{name}.b", np.zeros(dout, dtype=np.float32))

    def fwd(t, x):
        return ag.linear(x, t[f"{name}.w"], t[f"{name}.b"] if bias else None)

    return fwd


def _gn(ps, name, c) -> ForwardFn:
    ps.add(f"{name}.gain", np.ones(c, dtype=np.float32))
    ps.add(f"{name}.beta", np.zeros(c, dtype=np.float32))
    groups = _gn_groups(c)

    def fwd(t, x):
        return ag.group_norm(x, t[f"{name}.gain"], t[f"{name}.beta"], groups=groups)

    return fwd


def _ln(ps, name, d) -> ForwardFn:
    ps.add(f"{name}.gain", np.ones(d, dtype=np.float32))
    ps.add(f"{name}.beta", np.zeros(d, dtype=np.float32))

    def fwd(t, x):
        return ag.layer_norm(x, t[f"{name}.gain"], t[f"{name}.beta"])

    return fwd


def _chain(*fns: ForwardFn) -> ForwardFn:
    def fwd(t, x):
        for fn in fns:
            x = fn(t, x)
        return x

    return fwd


def _act(op) -> ForwardFn:
    return lambda t, x: op(x)


def _conv_gn_silu(ps, rng, name, cin, cout, k, stride=1) -> ForwardFn:
    return _chain(
        _conv(ps, rng, name + ".conv", cin, cout, k, stride, bias=False),
        _gn(ps, name + ".norm", cout),
        _act(ag.silu),
    )


# Blocks ------------------------------------------------------------------


def mv2_block(ps: ParameterSet, rng, name: str, cin: int, cout: int, stride: int, expand: int) -> ForwardFn:
    """Inverted residual: 1x1 expand -> 3x3 depthwise -> 1x1 project.

    Identity skip iff stride 1 and channel-preserving.
    """
    mid = cin * expand
    expand_fn = _conv_gn_silu(ps, rng, f"{name}.expand", cin, mid, 1)
    dw = _chain(
        _dwconv(ps, rng, f"{name}.dw", mid, 3, stride),
        _gn(ps, f"{name}.dwnorm", mid),
        _act(ag.silu),
    )
    project = _chain(
        _conv(ps, rng, f"{name}.project", mid, cout, 1, bias=False),
        _gn(ps, f"{name}.projnorm", cout),
    )
    skip = stride == 1 and cin == cout

    def fwd(t, x):
        y = project(t, dw(t, expand_fn(t, x)))
        return ag.add(x, y) if skip else y

    return fwd


def _transformer_layer(ps, rng, name, d, heads, mlp_ratio=2):
    if d % heads != 0:
        raise ValueError(f"{name}: embed dim {d} not divisible by {heads} heads")
    dh = d // heads
    att_scale = float(1.0 / np.sqrt(dh))
    ln1 = _ln(ps, f"{name}.ln1", d)
    q_fn = _linear(ps, rng, f"{name}.q", d, d)
    k_fn = _linear(ps, rng, f"{name}.k", d, d)
    v_fn = _linear(ps, rng, f"{name}.v", d, d)
    o_fn = _linear(ps, rng, f"{name}.o", d, d)
    ln2 = _ln(ps, f"{name}.ln2", d)
    fc1 = _linear(ps, rng, f"{name}.fc1", d, d * mlp_ratio)
    fc2 = _linear(ps, rng, f"{name}.fc2", d * mlp_ratio, d)

    def fwd(t, x):
        # x: (S, N, d) with S independent sequences.
        S, N, _ = x.shape
        h = ln1(t, x)

        def split(z):
            return ag.transpose(ag.reshape(z, (S, N, heads, dh)), (0, 2, 1, 3))

        q, k, v = split(q_fn(t, h)), split(k_fn(t, h)), split(v_fn(t, h))
        att = ag.softmax(ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), att_scale), axis=-1)
        y = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (S, N, d))
        x = ag.add(x, o_fn(t, y))
        m = fc2(t, ag.gelu(fc1(t, ln2(t, x))))
        return ag.add(x, m)

    return fwd


def mobilevit_block(ps: ParameterSet, rng, name: str, c: int, d: int, p: int, L: int, heads: int, mlp_ratio: int = 2) -> ForwardFn:
    """Local conv, patch-wise self-attention, fold back, fuse with the input."""
    local = _conv_gn_silu(ps, rng, f"{name}.local", c, c, 3)
    to_d = _conv(ps, rng, f"{name}.tod", c, d, 1, bias=True)
    layers = [_transformer_layer(ps, rng, f"{name}.tf{i}", d, heads, mlp_ratio) for i in range(L)]
    to_c = _conv_gn_silu(ps, rng, f"{name}.toc", d, c, 1)
    fuse = _conv_gn_silu(ps, rng, f"{name}.fuse", 2 * c, c, 3)

    def fwd(t, x):
        B, _, H, W = x.shape
        if H % p != 0 or W % p != 0:
            raise ValueError(f"{name}: feature side {H}x{W} not divisible by patch size {p}")
        y = to_d(t, local(t, x))
        # Unfold: one sequence per intra-patch pixel offset, length = patch count.
        hp, wp = H // p, W // p
        y = ag.reshape(y, (B, d, hp, p, wp, p))
        y = ag.transpose(y, (0, 3, 5, 2, 4, 1))  # (B, p, p, hp, wp, d)
        y = ag.reshape(y, (B * p * p, hp * wp, d))
        for layer in layers:
            y = layer(t, y)
        y = ag.reshape(y, (B, p, p, hp, wp, d))
        y = ag.transpose(y, (0, 5, 3, 1, 4, 2))  # (B, d, hp, p, wp, p)
        y = ag.reshape(y, (B, d, H, W))
        y = to_c(t, y)
        return fuse(t, ag.concat([x, y], axis=1))

    return fwd


def _resnet_block(ps, rng, name, cin, cout, stride):
    conv1 = _chain(
        _conv(ps, rng, f"{name}.conv1", cin, cout, 3, stride, bias=False),
        _gn(ps, f"{name}.norm1", cout),
        _act(ag.silu),
    )
    conv2 = _chain(
        _conv(ps, rng, f"{name}.conv2", cout, cout, 3, 1, bias=False),
        _gn(ps, f"{name}.norm2", cout),
    )
    needs_proj = stride != 1 or cin != cout
    if needs_proj:
        proj = _chain(
            _conv(ps, rng, f"{name}.proj", cin, cout, 1, stride, bias=False),
            _gn(ps, f"{name}.projnorm", cout),
        )

    def fwd(t, x):
        y = conv2(t, conv1(t, x))
        s = proj(t, x) if needs_proj else x
        return ag.silu(ag.add(s, y))

    return fwd


# Backbone configuration ---------------------------------------------------


@dataclass(frozen=True)
class BackboneConfig:
    """Stage plan for a backbone.

    Index 0 of widths/strides describes the stem conv (depths[0] is ignored);
    later indices are block stages. For the mobilevit-like family, the last
    len(attn_dims) stages append an attention block after their conv blocks.
    input_sizes lists every resolution the net must accept; patch
    divisibility is checked for each at construction time.
    """

    family: str
    stage_widths: tuple[int, ...]
    depths: tuple[int, ...]
    strides: tuple[int, ...]
    heads: int = 2
    patch_size: int = 2
    attn_dims: tuple[int, ...] = ()
    attn_layers: tuple[int, ...] = ()
    expand_ratio: int = 2
    mlp_ratio: int = 2
    final_width: int = 0
    input_sizes: tuple[int, ...] = (64, 32)
    scale: str = "desk"

    @property
    def input_size(self) -> int:
        return self.input_sizes[0]

    def validate(self) -> None:
        if self.family not in ("mobilevit-like", "resnet-like"):
            raise ValueError(f"unknown backbone family: {self.family!r}")
        if not (len(self.stage_widths) == len(self.depths) == len(self.strides)):
            raise ValueError("stage_widths, depths and strides must have equal length")
        if any(w <= 0 for w in self.stage_widths) or any(d < 0 for d in self.depths):
            raise ValueError("widths and depths must be positive")
        if self.family == "mobilevit-like":
            if len(self.attn_dims) != len(self.attn_layers):
                raise ValueError("attn_dims and attn_layers must have equal length")
            if len(self.attn_dims) > len(self.stage_widths) - 1:
                raise ValueError("more attention stages than block stages")
            for d in self.attn_dims:
                if d % self.heads != 0:
                    raise ValueError(f"attention dim {d} not divisible by {self.heads} heads")
            # Patch size must divide the feature side wherever attention runs,
            # for every declared input resolution.
            for size in self.input_sizes:
                sides = self._stage_sides(size)
                first_attn = len(self.stage_widths) - len(self.attn_dims)
                for i in range(first_attn, len(self.stage_widths)):
                    if i == 0:
                        continue
                    if sides[i] % self.patch_size != 0:
                        raise ValueError(
                            f"input size {size}: feature side {sides[i]} at stage {i} "
                            f"not divisible by patch size {self.patch_size}"
                        )

    def _stage_sides(self, size: int) -> list[int]:
        """Feature-map side after each stage (3x3 stride-s convs, padding 1)."""
        sides = []
        side = size
        for s in self.strides:
            side = (side + 2 - 3) // s + 1
            sides.append(side)
        return sides


def desk_mobilevit_config() -> BackboneConfig:
    return BackboneConfig(
        family="mobilevit-like",
        stage_widths=(12, 20, 28),
        depths=(1, 1, 1),
        strides=(2, 2, 2),
        heads=2,
        patch_size=2,
        attn_dims=(40,),
        attn_layers=(1,),
        expand_ratio=2,
        final_width=80,
        input_sizes=(64, 32),
        scale="desk",
    )


def paper_mobilevit_config() -> BackboneConfig:
    # MobileViT-small stage plan; 256 px keeps every attention stage's side
    # divisible by the patch size (224 leaves a 7-px side at the last stage).
    return BackboneConfig(
        family="mobilevit-like",
        stage_widths=(16, 32, 64, 96, 128, 160),
        depths=(1, 1, 3, 1, 1, 1),
        strides=(2, 1, 2, 2, 2, 2),
        heads=4,
        patch_size=2,
        attn_dims=(144, 192, 240),
        attn_layers=(2, 4, 3),
        expand_ratio=4,
        mlp_ratio=3,
        final_width=640,
        input_sizes=(256, 128),
        scale="paper",
    )


def desk_resnet_config() -> BackboneConfig:
    return BackboneConfig(
        family="resnet-like",
        stage_widths=(8, 8, 16, 32, 64),
        depths=(1, 1, 1, 1, 1),
        strides=(2, 1, 2, 2, 2),
        input_sizes=(64, 32),
        scale="desk",
    )


def paper_resnet_config() -> BackboneConfig:
    # Width multiplier chosen to land the basic-block plan near the 4.9M target.
    return BackboneConfig(
        family="resnet-like",
        stage_widths=(42, 42, 84, 168, 336),
        depths=(1, 2, 2, 2, 2),
        strides=(2, 1, 2, 2, 2),
        input_sizes=(224, 96),
        scale="paper",
    )


def backbone_preset(family: str, scale: str) -> BackboneConfig:
    presets = {
        ("mobilevit-like", "desk"): desk_mobilevit_config,
        ("mobilevit-like", "paper"): paper_mobilevit_config,
        ("resnet-like", "desk"): desk_resnet_config,
        ("resnet-like", "paper"): paper_resnet_config,
    }
    try:
        return presets[(family, scale)]()
    except KeyError:
        raise ValueError(f"no preset for family={family!r} scale={scale!r}") from None


@dataclass
class Backbone:
    """Callable forward plus the metadata other modules need."""

    fwd: ForwardFn
    embed_dim: int
    config: BackboneConfig

    def __call__(self, t: dict[str, Tensor], x) -> Tensor:
        return self.fwd(t, ag.as_tensor(x))


def build_backbone(cfg: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone") -> tuple[ParameterSet, Backbone]:
    """Construct parameters and the forward map from crops to embeddings."""
    cfg.validate()
    ps = ParameterSet()
    stages: list[ForwardFn] = [
        _conv_gn_silu(ps, rng, f"{prefix}.stem", 3, cfg.stage_widths[0], 3, cfg.strides[0])
    ]
    n_stages = len(cfg.stage_widths)
    first_attn = n_stages - len(cfg.attn_dims)
    cin = cfg.stage_widths[0]
    for i in range(1, n_stages):
        cout = cfg.stage_widths[i]
        blocks: list[ForwardFn] = []
        for j in range(cfg.depths[i]):
            stride = cfg.strides[i] if j == 0 else 1
            if cfg.family == "mobilevit-like":
                blocks.append(mv2_block(ps, rng, f"{prefix}.s{i}.b{j}", cin, cout, stride, cfg.expand_ratio))
            else:
                blocks.append(_resnet_block(ps, rng, f"{prefix}.s{i}.b{j}", cin, cout, stride))
            cin = cout
        if cfg.family == "mobilevit-like" and i >= first_attn:
            k = i - first_attn
            blocks.append(
                mobilevit_block(
                    ps, rng, f"{prefix}.s{i}.attn", cout,
                    d=cfg.attn_dims[k], p=cfg.patch_size, L=cfg.attn_layers[k],
                    heads=cfg.heads, mlp_ratio=cfg.mlp_ratio,
                )
            )
        stages.append(_chain(*blocks))
    embed_dim = cin
    if cfg.family == "mobilevit-like" and cfg.final_width:
        stages.append(_conv_gn_silu(ps, rng, f"{prefix}.final", cin, cfg.final_width, 1))
        embed_dim = cfg.final_width
    body = _chain(*stages)

    def fwd(t, x):
        return ag.global_avg_pool(body(t, x))

    return ps, Backbone(fwd=fwd, embed_dim=embed_dim, config=cfg)


# Projection head ----------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int
    hidden_dims: tuple[int, ...] = (512, 512)
    bottleneck_dim: int = 128
    out_dim: int = 1024
    norm_last_layer: bool = False

    def validate(self) -> None:
        if self.out_dim < 2:
            raise ValueError(f"head out_dim must be >= 2, got {self.out_dim}")


def build_head(cfg: HeadConfig, rng: np.random.Generator, prefix: str = "head") -> tuple[ParameterSet, ForwardFn]:
    """MLP -> bottleneck -> L2 normalize -> final K-row linear map.

    The final layer keeps full He scale: a shrunk init leaves the teacher
    softmax at temperature 0.04 near uniform, and at short desk-scale runs
    the teacher/student pair then never leaves that fixpoint. With
    norm_last_layer the final rows are renormalized to unit length at every
    forward (fixed unit scale).
    """
    cfg.validate()
    ps = ParameterSet()
    fns: list[ForwardFn] = []
    din = cfg.in_dim
    for i, h in enumerate(cfg.hidden_dims):
        fns.append(_linear(ps, rng, f"{prefix}.fc{i}", din, h))
        fns.append(_act(ag.gelu))
        din = h
    fns.append(_linear(ps, rng, f"{prefix}.bottleneck", din, cfg.bottleneck_dim))
    mlp = _chain(*fns)
    ps.add(f"{prefix}.out.w", _he_normal(rng, (cfg.bottleneck_dim, cfg.out_dim), fan_in=cfg.bottleneck_dim))

    def fwd(t, z):
        z = ag.as_tensor(z)
        bad = ~np.isfinite(z.data)
        if bad.any():
            rows = bad.any(axis=tuple(range(1, z.ndim))) if z.ndim > 1 else bad
            idx = int(np.flatnonzero(rows)[0])
            raise FloatingPointError(f"non-finite head input at batch index {idx}")
        h = ag.l2_normalize(mlp(t, z), axis=-1)
        w = t[f"{prefix}.out.w"]
        if cfg.norm_last_layer:
            w = ag.l2_normalize(w, axis=0)
        return ag.matmul(h, w)

    return ps, fwd


def forward_head(head_fwd: ForwardFn, tensors: dict[str, Tensor], z) -> Tensor:
    """Apply a built head to a batch of embeddings."""
    return head_fwd(tensors, z)


# Whole model ----------------------------------------------------------------


@dataclass
class Model:
    """Backbone plus head sharing one ParameterSet (names are prefixed)."""

    params: ParameterSet
    backbone: Backbone
    head_fwd: ForwardFn | None
    head_cfg: HeadConfig | None

    @property
    def embed_dim(self) -> int:
        return self.backbone.embed_dim

    @property
    def out_dim(self) -> int | None:
        return self.head_cfg.out_dim if self.head_cfg else None

    def forward(self, t: dict[str, Tensor], x) -> Tensor:
        z = self.backbone(t, x)
        return self.head_fwd(t, z) if self.head_fwd else z

    def embed(self, t: dict[str, Tensor], x) -> Tensor:
        return self.backbone(t, x)


def build_model(backbone_cfg: BackboneConfig, head_cfg: HeadConfig | None, rng: np.random.Generator) -> Model:
    ps, backbone = build_backbone(backbone_cfg, rng)
    head_fwd = None
    resolved_head = None
    if head_cfg is not None:
        resolved_head = replace(head_cfg, in_dim=backbone.embed_dim) if head_cfg.in_dim != backbone.embed_dim else head_cfg
        head_ps, head_fwd = build_head(resolved_head, rng)
        for name, arr in head_ps.items():
            ps.add(name, arr)
    return Model(params=ps, backbone=backbone, head_fwd=head_fwd, head_cfg=resolved_head)


# Gradient entry point --------------------------------------------------------


def backward(forward_fn, params: ParameterSet, x: np.ndarray, output_grad: np.ndarray):
    """Reverse-mode gradients of a forward map.

    Runs forward with recording enabled, injects `output_grad` at the output,
    and returns ({param name: gradient}, input gradient). Parameters that the
    output does not depend on get zero gradients.
    """
    t = params.tensors(requires_grad=True)
    xt = Tensor(np.asarray(x), requires_grad=True)
    out = forward_fn(t, xt)
    out.backward(np.asarray(output_grad, dtype=out.data.dtype))
    grads = {
        name: (tt.grad if tt.grad is not None else np.zeros_like(tt.data))
        for name, tt in t.items()
    }
    xgrad = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return grads, xgrad
