"""Symbolic shape propagation: exact parameter and multiply-accumulate counts.

Works from a :class:`~robustlab.arch.ModelSpec` alone, no tensors are
allocated, so full ImageNet-size presets are analysed in milliseconds.

Counting convention: one FLOP is one multiply-accumulate. Convolutions
cost ``k*k*Cin/groups*Cout*Hout*Wout``, linear layers ``in*out`` per
token, attention adds both ``L*L*d`` token-mixing products. Norms,
activations, softmax and pooling count as zero.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .arch import ModelSpec


@dataclass
class LayerRow:
    name: str
    out_shape: tuple[int, ...]
    params: int
    macs: int


@dataclass
class CostReport:
    spec_name: str
    resolution: int
    rows: list[LayerRow] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def add(self, name, out_shape, params=0, macs=0) -> None:
        self.rows.append(LayerRow(name, tuple(out_shape), int(params), int(macs)))

    def final_shape(self, prefix: str) -> tuple[int, ...]:
        """Output shape of the last row whose name starts with ``prefix``."""
        for row in reversed(self.rows):
            if row.name.startswith(prefix):
                return row.out_shape
        raise KeyError(prefix)


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def analyze(spec: ModelSpec, resolution: int | None = None) -> CostReport:
    """Per-layer parameter/MAC rows for ``spec`` at ``resolution`` (default: build size)."""
    res = spec.input_resolution if resolution is None else resolution
    if res < 1:
        raise ValueError(f"resolution must be positive, got {res}")
    total = spec.stem_stride
    if spec.family == "convnext":
        for s in spec.downsample_strides:
            total *= s
    if res % total:
        raise ValueError(f"resolution {res} incompatible with total stride {total} of {spec.name}")

    rep = CostReport(spec.name, res)
    c, h = 3, res
    for i, layer in enumerate(spec.stem.layers):
        k, s = layer.kernel, layer.stride
        pad = 0 if k == s else k // 2
        h = _conv_out(h, k, s, pad)
        cout = layer.out_channels
        rep.add(f"stem.{i}.conv", (cout, h, h), k * k * c * cout + cout, k * k * c * cout * h * h)
        if layer.has_norm:
            rep.add(f"stem.{i}.norm", (cout, h, h), 2 * cout)
        c = cout
    if spec.stem.final_pointwise:
        cout = spec.stem.final_pointwise
        rep.add("stem.proj", (cout, h, h), c * cout + cout, c * cout * h * h)
        c = cout

    r = spec.mlp_ratio
    if spec.family == "vit":
        d = c
        length = h * h + (1 if spec.class_token else 0)
        pos_rows = h * h + (1 if spec.class_token and spec.class_token_pos else 0)
        rep.add("cls_token", (1, d), d if spec.class_token else 0)
        rep.add("pos_embed", (pos_rows, d), pos_rows * d)
        hd = d // spec.heads
        for j in range(spec.stage_depths[0]):
            b = f"blocks.{j}"
            rep.add(f"{b}.norm1", (length, d), 2 * d)
            rep.add(f"{b}.attn.qkv", (length, 3 * d), d * 3 * d + 3 * d, length * d * 3 * d)
            rep.add(f"{b}.attn.scores", (spec.heads, length, length), 0, spec.heads * length * length * hd)
            rep.add(f"{b}.attn.mix", (length, d), 0, spec.heads * length * length * hd)
            rep.add(f"{b}.attn.proj", (length, d), d * d + d, length * d * d)
            rep.add(f"{b}.norm2", (length, d), 2 * d)
            rep.add(f"{b}.mlp.fc1", (length, r * d), d * r * d + r * d, length * d * r * d)
            rep.add(f"{b}.mlp.fc2", (length, d), r * d * d + d, length * r * d * d)
            if spec.layer_scale:
                rep.add(f"{b}.layer_scale", (length, d), 2 * d)
        rep.add("norm", (length, d), 2 * d)
        rep.add("head", (spec.num_classes,), d * spec.num_classes + spec.num_classes, d * spec.num_classes)
        return rep

    for i, (depth, width) in enumerate(zip(spec.stage_depths, spec.stage_widths)):
        if i > 0:
            s = spec.downsample_strides[i - 1]
            rep.add(f"downsample.{i}.norm", (c, h, h), 2 * c)
            h = _conv_out(h, 2, s, 0)
            rep.add(f"downsample.{i}.conv", (width, h, h), 4 * c * width + width, 4 * c * width * h * h)
            c = width
        for j in range(depth):
            b = f"stages.{i}.{j}"
            rep.add(f"{b}.dwconv", (c, h, h), 49 * c + c, 49 * c * h * h)
            rep.add(f"{b}.norm", (c, h, h), 2 * c)
            rep.add(f"{b}.pw1", (r * c, h, h), c * r * c + r * c, c * r * c * h * h)
            rep.add(f"{b}.pw2", (c, h, h), r * c * c + c, r * c * c * h * h)
            if spec.layer_scale:
                rep.add(f"{b}.gamma", (c, h, h), c)
    rep.add("norm", (c,), 2 * c)
    rep.add("head", (spec.num_classes,), c * spec.num_classes + spec.num_classes, c * spec.num_classes)
    return rep


def count_params(spec: ModelSpec) -> int:
    return analyze(spec).params


def count_macs(spec: ModelSpec, resolution: int | None = None) -> int:
    return analyze(spec, resolution).macs


def stage_shapes(spec: ModelSpec, resolution: int | None = None) -> dict[str, tuple[int, ...]]:
    """Output shape (C, H, W) after the stem and after each stage."""
    rep = analyze(spec, resolution)
    out = {"stem": rep.final_shape("stem")}
    if spec.family == "vit":
        out["blocks"] = rep.final_shape("blocks")
        return out
    for i in range(len(spec.stage_depths)):
        prefix = f"stages.{i}." if spec.stage_depths[i] else f"downsample.{i}."
        out[f"stage{i}"] = rep.final_shape(prefix)
    return out


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------
@dataclass
class CostRow:
    name: str
    params: int
    macs: int
    params_delta_pct: float | None = None
    macs_delta_pct: float | None = None


CSV_HEADER = ("name", "params", "macs", "params_m", "gmacs", "params_delta_pct", "macs_delta_pct")


def cost_table(specs: list[ModelSpec], resolution: int = 224) -> tuple[list[CostReport], list[CostRow]]:
    """Reports plus summary rows; ``X+convstem`` rows carry % change against ``X``."""
    reports = [analyze(s, resolution) for s in specs]
    by_name = {r.spec_name: r for r in reports}
    rows = []
    for rep in reports:
        row = CostRow(rep.spec_name, rep.params, rep.macs)
        if rep.spec_name.endswith("+convstem"):
            base = by_name.get(rep.spec_name[: -len("+convstem")])
            if base is not None:
                row.params_delta_pct = 100.0 * (rep.params - base.params) / base.params
                row.macs_delta_pct = 100.0 * (rep.macs - base.macs) / base.macs
        rows.append(row)
    return reports, rows


def _fmt_pct(v: float | None) -> str:
    return "" if v is None else f"{v:+.1f}"


def rows_to_csv(rows: list[CostRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.name, r.params, r.macs, f"{r.params / 1e6:.2f}", f"{r.macs / 1e9:.2f}",
                    _fmt_pct(r.params_delta_pct), _fmt_pct(r.macs_delta_pct)])
    return buf.getvalue()


def rows_to_text(rows: list[CostRow]) -> str:
    head = f"{'architecture':<34}{'GMACs':>8}{'Δ%':>8}{'Params(M)':>11}{'Δ%':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.name:<34}{r.macs / 1e9:>8.2f}{_fmt_pct(r.macs_delta_pct):>8}"
                     f"{r.params / 1e6:>11.2f}{_fmt_pct(r.params_delta_pct):>8}")
    return "\n".join(lines)
