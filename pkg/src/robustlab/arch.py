"""Declarative ConvNeXt / ViT / isotropic-ConvNeXt zoo with patch and conv stems.

A :class:`ModelSpec` fully describes an architecture. Full-size presets are
meant for cost analysis (see :mod:`robustlab.analyzer`); the ``micro-*``
presets keep every structural feature but run in seconds on a CPU.
"""
from __future__ import annotations

import contextlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

FAMILIES = ("convnext", "vit", "isotropic_convnext")
NORM_EPS = 1e-6
INIT_STD = 0.02
LAYER_SCALE_INIT = 1e-6


@dataclass(frozen=True)
class StemLayer:
    kernel: int
    stride: int
    out_channels: int
    has_norm: bool = True
    has_act: bool = True

    @property
    def padding(self) -> int:
        # non-overlapping patchify convs are unpadded, the rest keep "same" geometry
        return 0 if self.kernel == self.stride else self.kernel // 2


@dataclass(frozen=True)
class StemSpec:
    kind: str                       # "patch" | "conv"
    layers: tuple[StemLayer, ...]
    final_pointwise: int | None = None

    @property
    def total_stride(self) -> int:
        return int(np.prod([l.stride for l in self.layers]))

    @property
    def out_channels(self) -> int:
        return self.final_pointwise if self.final_pointwise else self.layers[-1].out_channels


@dataclass(frozen=True)
class ModelSpec:
    name: str
    family: str
    stage_depths: tuple[int, ...]
    stage_widths: tuple[int, ...]
    stem: StemSpec
    heads: int = 0
    num_classes: int = 1000
    input_resolution: int = 224
    stem_stride: int = 4
    downsample_strides: tuple[int, ...] = (2, 2, 2)
    mlp_ratio: int = 4
    layer_scale: bool = False
    class_token: bool = False
    class_token_pos: bool = True
    norm_eps: float = NORM_EPS

    @property
    def width(self) -> int:
        return self.stage_widths[0]

    @property
    def isotropic(self) -> bool:
        return self.family != "convnext"

    @property
    def grid(self) -> int:
        return self.input_resolution // self.stem_stride

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if len(self.stage_depths) != len(self.stage_widths):
            raise ValueError("stage_depths and stage_widths differ in length")
        if self.family == "convnext":
            if len(self.stage_depths) != 4:
                raise ValueError(f"convnext needs 4 stages, got {len(self.stage_depths)}")
            if len(self.downsample_strides) != 3:
                raise ValueError("convnext needs 3 downsample strides")
        elif len(self.stage_depths) != 1:
            raise ValueError(f"{self.family} is isotropic and has exactly one stage")
        if self.family == "vit":
            if self.heads < 1 or self.width % self.heads:
                raise ValueError(f"vit width {self.width} not divisible by heads {self.heads}")
        if self.stem.total_stride != self.stem_stride:
            raise ValueError(
                f"stem strides multiply to {self.stem.total_stride}, "
                f"but {self.family} needs stem downsampling {self.stem_stride}"
            )
        if self.stem.out_channels != self.width:
            raise ValueError(
                f"stem produces {self.stem.out_channels} channels, trunk expects {self.width}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    # -- structured-text round trip ---------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        doc = dict(doc)
        stem = doc.pop("stem")
        layers = tuple(StemLayer(**l) for l in stem["layers"])
        doc["stem"] = StemSpec(stem["kind"], layers, stem.get("final_pointwise"))
        for key in ("stage_depths", "stage_widths", "downsample_strides"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class PosEmbed:
    grid: np.ndarray                         # G x G x D
    class_token_embed: np.ndarray | None = None


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------
def _patch(k: int, width: int, norm: bool) -> StemSpec:
    return StemSpec("patch", (StemLayer(k, k, width, has_norm=norm, has_act=False),))


def _conv(*plan: tuple[int, int, int], pointwise: int | None = None) -> StemSpec:
    return StemSpec("conv", tuple(StemLayer(k, s, c) for k, s, c in plan), pointwise)


def _convnext(name, depths, widths, stem, **kw) -> ModelSpec:
    return ModelSpec(name, "convnext", depths, widths, stem, stem_stride=4, layer_scale=True, **kw)


def _vit(name, depth, width, heads, stem, patch=16, **kw) -> ModelSpec:
    kw.setdefault("class_token", True)
    return ModelSpec(name, "vit", (depth,), (width,), stem, heads=heads, stem_stride=patch, **kw)


def _iso(name, depth, width, stem, patch=16, **kw) -> ModelSpec:
    return ModelSpec(name, "isotropic_convnext", (depth,), (width,), stem, stem_stride=patch, **kw)


# ConvNeXt: two 3x3/2 convs, C/2 -> C
_CN_STEM = _conv((3, 2, 48), (3, 2, 96))
# ConvNeXt-B: N, 1.5N stride 2 then 2N stride 1, N = 64
_CNB_STEM = _conv((3, 2, 64), (3, 2, 96), (3, 1, 128))
# ViT / isotropic: four 3x3/2 convs N, 2N, 4N, 8N (N = 48) then 1x1 to the width
_VIT_CONVS = ((3, 2, 48), (3, 2, 96), (3, 2, 192), (3, 2, 384))

_CN_T = ((3, 3, 9, 3), (96, 192, 384, 768))
_CN_S = ((3, 3, 27, 3), (96, 192, 384, 768))
_CN_B = ((3, 3, 27, 3), (128, 256, 512, 1024))

_PRESETS: dict[str, ModelSpec] = {}


def _register(spec: ModelSpec) -> None:
    _PRESETS[spec.name] = spec


_register(_convnext("convnext-t", *_CN_T, _patch(4, 96, True)))
_register(_convnext("convnext-t+convstem", *_CN_T, _CN_STEM))
_register(_convnext("convnext-s", *_CN_S, _patch(4, 96, True)))
_register(_convnext("convnext-s+convstem", *_CN_S, _CN_STEM))
_register(_convnext("convnext-b", *_CN_B, _patch(4, 128, True)))
_register(_convnext("convnext-b+convstem", *_CN_B, _CNB_STEM))
_register(_vit("vit-s", 12, 384, 6, _patch(16, 384, False)))
_register(_vit("vit-s+convstem", 12, 384, 6, _conv(*_VIT_CONVS, pointwise=384)))
# medium ViT follows the DeiT-III layout: layer scale, no positional slot for the class token
_register(_vit("vit-m", 12, 512, 8, _patch(16, 512, False), layer_scale=True, class_token_pos=False))
_register(_vit("vit-m+convstem", 12, 512, 8, _conv(*_VIT_CONVS, pointwise=512),
               layer_scale=True, class_token_pos=False))
_register(_vit("vit-b", 12, 768, 12, _patch(16, 768, False)))
_register(_vit("vit-b+convstem", 12, 768, 12, _conv(*_VIT_CONVS, pointwise=768)))
_register(_iso("isotropic-convnext-s", 18, 384, _patch(16, 384, False)))
_register(_iso("isotropic-convnext-s+convstem", 18, 384, _conv(*_VIT_CONVS, pointwise=384)))

_MICRO = dict(num_classes=10, input_resolution=32)
_register(_convnext("micro-convnext", (1, 1, 2, 1), (16, 32, 64, 128), _patch(4, 16, True), **_MICRO))
_register(_convnext("micro-convnext+convstem", (1, 1, 2, 1), (16, 32, 64, 128),
                    _conv((3, 2, 8), (3, 2, 16)), **_MICRO))
_register(_vit("micro-vit", 2, 32, 2, _patch(8, 32, False), patch=8, **_MICRO))
_register(_vit("micro-vit+convstem", 2, 32, 2, _conv((3, 2, 4), (3, 2, 8), (3, 2, 16), pointwise=32),
               patch=8, **_MICRO))
_register(_iso("micro-isotropic-convnext", 2, 32, _patch(8, 32, False), patch=8, **_MICRO))
_register(_iso("micro-isotropic-convnext+convstem", 2, 32,
               _conv((3, 2, 4), (3, 2, 8), (3, 2, 16), pointwise=32), patch=8, **_MICRO))

PRESET_GROUPS = {
    "table7": (
        "convnext-t", "convnext-t+convstem",
        "isotropic-convnext-s", "isotropic-convnext-s+convstem",
        "vit-s", "vit-s+convstem",
        "vit-m", "vit-m+convstem",
        "convnext-s", "convnext-s+convstem",
        "vit-b", "vit-b+convstem",
        "convnext-b", "convnext-b+convstem",
    ),
    "micro": tuple(n for n in _PRESETS if n.startswith("micro-")),
}


def preset_names() -> list[str]:
    return list(_PRESETS)


def preset_spec(name: str, **overrides) -> ModelSpec:
    """Look up a registered architecture; keyword overrides replace spec fields."""
    key = name.lower()
    if key not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; registered: {', '.join(_PRESETS)}")
    spec = _PRESETS[key]
    return replace(spec, **overrides) if overrides else spec


def resolve_presets(names: str | list[str]) -> list[ModelSpec]:
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    out: list[ModelSpec] = []
    for n in names:
        if n in PRESET_GROUPS:
            out.extend(preset_spec(m) for m in PRESET_GROUPS[n])
        else:
            out.append(preset_spec(n))
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------
def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init-kind) for every learnable tensor of ``spec``."""
    out: list[tuple[str, tuple[int, ...], str]] = []

    def lin(prefix, cin, cout):
        out.append((f"{prefix}.weight", (cout, cin), "normal"))
        out.append((f"{prefix}.bias", (cout,), "zeros"))

    def conv(prefix, cin, cout, k, groups=1):
        out.append((f"{prefix}.weight", (cout, cin // groups, k, k), "normal"))
        out.append((f"{prefix}.bias", (cout,), "zeros"))

    def norm(prefix, c):
        out.append((f"{prefix}.weight", (c,), "ones"))
        out.append((f"{prefix}.bias", (c,), "zeros"))

    cin = 3
    for i, layer in enumerate(spec.stem.layers):
        conv(f"stem.{i}.conv", cin, layer.out_channels, layer.kernel)
        if layer.has_norm:
            norm(f"stem.{i}.norm", layer.out_channels)
        cin = layer.out_channels
    if spec.stem.final_pointwise:
        conv("stem.proj", cin, spec.stem.final_pointwise, 1)

    hidden = lambda c: c * spec.mlp_ratio  # noqa: E731
    if spec.family == "vit":
        d = spec.width
        grid_tokens = spec.grid ** 2
        if spec.class_token:
            out.append(("cls_token", (1, 1, d), "normal"))
        n_pos = grid_tokens + (1 if spec.class_token and spec.class_token_pos else 0)
        out.append(("pos_embed", (1, n_pos, d), "normal"))
        for j in range(spec.stage_depths[0]):
            b = f"blocks.{j}"
            norm(f"{b}.norm1", d)
            lin(f"{b}.attn.qkv", d, 3 * d)
            lin(f"{b}.attn.proj", d, d)
            if spec.layer_scale:
                out.append((f"{b}.ls1", (d,), "layer_scale"))
            norm(f"{b}.norm2", d)
            lin(f"{b}.mlp.fc1", d, hidden(d))
            lin(f"{b}.mlp.fc2", hidden(d), d)
            if spec.layer_scale:
                out.append((f"{b}.ls2", (d,), "layer_scale"))
        norm("norm", d)
        lin("head", d, spec.num_classes)
        return out

    for i, (depth, c) in enumerate(zip(spec.stage_depths, spec.stage_widths)):
        if i > 0:
            norm(f"downsample.{i}.norm", spec.stage_widths[i - 1])
            conv(f"downsample.{i}.conv", spec.stage_widths[i - 1], c, 2)
        for j in range(depth):
            b = f"stages.{i}.{j}"
            conv(f"{b}.dwconv", c, c, 7, groups=c)
            norm(f"{b}.norm", c)
            lin(f"{b}.pw1", c, hidden(c))
            lin(f"{b}.pw2", hidden(c), c)
            if spec.layer_scale:
                out.append((f"{b}.gamma", (c,), "layer_scale"))
    norm("norm", spec.stage_widths[-1])
    lin("head", spec.stage_widths[-1], spec.num_classes)
    return out


def _init_param(rng, shape, kind, dtype) -> np.ndarray:
    if kind == "normal":
        arr = _trunc_normal(rng, shape)
    elif kind == "ones":
        arr = np.ones(shape)
    elif kind == "layer_scale":
        arr = np.full(shape, LAYER_SCALE_INIT)
    else:
        arr = np.zeros(shape)
    return arr.astype(dtype)


# ---------------------------------------------------------------------------
# runnable model
# ---------------------------------------------------------------------------
@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor] = field(default_factory=dict)

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self.params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        if strict:
            extra = sorted(set(state) - set(self.params))
            if extra:
                raise KeyError(f"unexpected parameter {extra[0]!r}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop parameters from collecting gradients."""
        flags = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for k, p in self.params.items():
                p.requires_grad = flags[k]

    def copy(self) -> "Model":
        return Model(self.spec, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                 for k, v in self.params.items()})


def build(spec: ModelSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> Model:
    """Instantiate ``spec`` with deterministic, seed-dependent parameters."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in param_layout(spec):
        params[name] = Tensor(_init_param(rng, shape, kind, dtype), requires_grad=True, name=name)
    return Model(spec, params)


def _stem(model: Model, x: Tensor) -> Tensor:
    spec, p = model.spec, model.params
    for i, layer in enumerate(spec.stem.layers):
        x = T.conv2d(x, p[f"stem.{i}.conv.weight"], p[f"stem.{i}.conv.bias"],
                     stride=layer.stride, padding=layer.padding)
        if layer.has_norm:
            x = T.layer_norm_2d(x, p[f"stem.{i}.norm.weight"], p[f"stem.{i}.norm.bias"], spec.norm_eps)
        if layer.has_act:
            x = T.gelu(x)
    if spec.stem.final_pointwise:
        x = T.conv2d(x, p["stem.proj.weight"], p["stem.proj.bias"])
    return x


def _convnext_block(p, b: str, x: Tensor, eps: float, layer_scale: bool) -> Tensor:
    y = T.depthwise_conv2d(x, p[f"{b}.dwconv.weight"], p[f"{b}.dwconv.bias"])
    y = T.transpose(y, (0, 2, 3, 1))
    y = T.layer_norm(y, p[f"{b}.norm.weight"], p[f"{b}.norm.bias"], eps)
    y = T.gelu(T.linear(y, p[f"{b}.pw1.weight"], p[f"{b}.pw1.bias"]))
    y = T.linear(y, p[f"{b}.pw2.weight"], p[f"{b}.pw2.bias"])
    if layer_scale:
        y = y * p[f"{b}.gamma"]
    return x + T.transpose(y, (0, 3, 1, 2))


def _vit_block(p, b: str, x: Tensor, heads: int, eps: float, layer_scale: bool) -> Tensor:
    y = T.layer_norm(x, p[f"{b}.norm1.weight"], p[f"{b}.norm1.bias"], eps)
    y = T.multihead_attention(y, p[f"{b}.attn.qkv.weight"], p[f"{b}.attn.qkv.bias"],
                              p[f"{b}.attn.proj.weight"], p[f"{b}.attn.proj.bias"], heads)
    if layer_scale:
        y = y * p[f"{b}.ls1"]
    x = x + y
    y = T.layer_norm(x, p[f"{b}.norm2.weight"], p[f"{b}.norm2.bias"], eps)
    y = T.gelu(T.linear(y, p[f"{b}.mlp.fc1.weight"], p[f"{b}.mlp.fc1.bias"]))
    y = T.linear(y, p[f"{b}.mlp.fc2.weight"], p[f"{b}.mlp.fc2.bias"])
    if layer_scale:
        y = y * p[f"{b}.ls2"]
    return x + y


def check_resolution(spec: ModelSpec, h: int, w: int) -> None:
    if h != w:
        raise ValueError(f"square inputs only, got {h}x{w}")
    if spec.family == "convnext":
        total = spec.stem_stride * int(np.prod(spec.downsample_strides))
        if h % total:
            raise ValueError(f"resolution {h} not divisible by total stride {total}")
    else:
        if h % spec.stem_stride:
            raise ValueError(f"resolution {h} not divisible by stem stride {spec.stem_stride}")
        if spec.family == "vit" and h // spec.stem_stride != spec.grid:
            raise ValueError(
                f"positional embedding is built for a {spec.grid}x{spec.grid} grid "
                f"({spec.input_resolution}px); call with_resolution({h}) first"
            )


def _convnext_trunk(model: Model, x: Tensor) -> list[Tensor]:
    spec, p, eps = model.spec, model.params, model.spec.norm_eps
    outs = []
    for i, depth in enumerate(spec.stage_depths):
        if i > 0:
            x = T.layer_norm_2d(x, p[f"downsample.{i}.norm.weight"], p[f"downsample.{i}.norm.bias"], eps)
            x = T.conv2d(x, p[f"downsample.{i}.conv.weight"], p[f"downsample.{i}.conv.bias"],
                         stride=spec.downsample_strides[i - 1])
        for j in range(depth):
            x = _convnext_block(p, f"stages.{i}.{j}", x, eps, spec.layer_scale)
        outs.append(x)
    return outs


def forward_stages(model: Model, batch) -> dict[str, Tensor]:
    """Stem output and, for staged / isotropic ConvNeXt, every stage output."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    check_resolution(model.spec, x.shape[2], x.shape[3])
    x = _stem(model, x)
    out = {"stem": x}
    if model.spec.family == "vit":
        return out
    for i, s in enumerate(_convnext_trunk(model, x)):
        out[f"stage{i}"] = s
    return out


def forward(model: Model, batch) -> Tensor:
    """Logits N x num_classes for an N x 3 x H x W batch in [0, 1]."""
    spec, p = model.spec, model.params
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected N x 3 x H x W input, got {x.shape}")
    check_resolution(spec, x.shape[2], x.shape[3])
    eps = spec.norm_eps
    x = _stem(model, x)

    if spec.family == "vit":
        n, d = x.shape[0], x.shape[1]
        tokens = T.transpose(T.reshape(x, (n, d, -1)), (0, 2, 1))
        pos = p["pos_embed"]
        if spec.class_token:
            cls = T.mul(Tensor(np.ones((n, 1, 1), dtype=x.dtype)), p["cls_token"])
            if spec.class_token_pos:
                tokens = T.concat([cls, tokens], axis=1) + pos
            else:
                tokens = T.concat([cls, tokens + pos], axis=1)
        else:
            tokens = tokens + pos
        for j in range(spec.stage_depths[0]):
            tokens = _vit_block(p, f"blocks.{j}", tokens, spec.heads, eps, spec.layer_scale)
        tokens = T.layer_norm(tokens, p["norm.weight"], p["norm.bias"], eps)
        feat = tokens[:, 0] if spec.class_token else T.tmean(tokens, axis=1)
        return T.linear(feat, p["head.weight"], p["head.bias"])

    x = _convnext_trunk(model, x)[-1]
    feat = T.global_avg_pool(x)
    feat = T.layer_norm(feat, p["norm.weight"], p["norm.bias"], eps)
    return T.linear(feat, p["head.weight"], p["head.bias"])


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Arg-max class for each image, without building a gradient graph."""
    out = []
    with model.frozen():
        for s in range(0, len(images), batch_size):
            out.append(forward(model, images[s:s + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# positional embeddings and resolution changes
# ---------------------------------------------------------------------------
def get_pos_embed(model: Model) -> PosEmbed:
    spec = model.spec
    if spec.family != "vit":
        raise ValueError(f"{spec.family} has no positional embedding")
    table = model.params["pos_embed"].data[0]
    g = spec.grid
    if spec.class_token and spec.class_token_pos:
        return PosEmbed(table[1:].reshape(g, g, -1).copy(), table[0].copy())
    return PosEmbed(table.reshape(g, g, -1).copy(), None)


def interpolate_pos_embed(pos: PosEmbed, new_grid: int) -> PosEmbed:
    """Bicubically resample the patch grid; the class-token slot is copied as is."""
    if new_grid < 2:
        raise ValueError(f"new_grid must be at least 2, got {new_grid}")
    g = pos.grid.shape[0]
    if new_grid == g:
        grid = pos.grid.copy()
    else:
        chw = np.ascontiguousarray(pos.grid.transpose(2, 0, 1))
        mh = T.bicubic_matrix(g, new_grid).astype(chw.dtype)
        grid = (mh @ chw @ mh.T).transpose(1, 2, 0)
    cls = None if pos.class_token_embed is None else pos.class_token_embed.copy()
    return PosEmbed(np.ascontiguousarray(grid, dtype=pos.grid.dtype), cls)


def with_resolution(model: Model, resolution: int) -> Model:
    """Same weights, evaluated at ``resolution``; ViT positional tables are interpolated."""
    spec = replace(model.spec, input_resolution=resolution)
    params = dict(model.params)
    if spec.family == "vit":
        if resolution % spec.stem_stride:
            raise ValueError(f"resolution {resolution} not divisible by patch {spec.stem_stride}")
        pos = interpolate_pos_embed(get_pos_embed(model), resolution // spec.stem_stride)
        rows = pos.grid.reshape(-1, pos.grid.shape[-1])
        if pos.class_token_embed is not None:
            rows = np.concatenate([pos.class_token_embed[None], rows], axis=0)
        params["pos_embed"] = Tensor(rows[None].copy(), requires_grad=True, name="pos_embed")
    return Model(spec, params)


# ---------------------------------------------------------------------------
# transfer adaptations
# ---------------------------------------------------------------------------
def replace_head(model: Model, num_classes: int, seed: int = 0) -> Model:
    """Fresh linear classifier for ``num_classes``; every other tensor is copied bit-exactly."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    spec = replace(model.spec, num_classes=num_classes)
    rng = np.random.default_rng(seed)
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in model.params.items()}
    width = params["head.weight"].shape[1]
    dtype = params["head.weight"].dtype
    params["head.weight"] = Tensor(_trunc_normal(rng, (num_classes, width)).astype(dtype),
                                   requires_grad=True, name="head.weight")
    params["head.bias"] = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="head.bias")
    return Model(spec, params)


def adapt_low_res(model: Model) -> Model:
    """Set the conv-stem strides and the first downsampling stride to 1 (ConvNeXt + ConvStem only)."""
    spec = model.spec
    if spec.family != "convnext" or spec.stem.kind != "conv":
        raise ValueError("adapt_low_res applies only to ConvNeXt with a convolutional stem")
    layers = tuple(replace(l, stride=1) for l in spec.stem.layers)
    new_spec = replace(
        spec,
        stem=replace(spec.stem, layers=layers),
        stem_stride=1,
        downsample_strides=(1,) + tuple(spec.downsample_strides[1:]),
    )
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in model.params.items()}
    return Model(new_spec, params)
