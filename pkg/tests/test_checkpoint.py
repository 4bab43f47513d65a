import dataclasses

import numpy as np
import pytest

from robustlab.arch import PRESET_GROUPS, build, preset_spec
from robustlab.checkpoint import (MAGIC, Checkpoint, from_bytes, load_checkpoint, load_into, make_checkpoint,
                                  save_checkpoint, to_bytes)


@pytest.fixture
def ckpt():
    model = build(preset_spec("micro-vit+convstem"), seed=3)
    ema = {k: p.data * 0.5 for k, p in model.params.items()}
    return make_checkpoint(model, ema, step=17, seed=3, meta={"epoch": 2})


@pytest.mark.parametrize("name", PRESET_GROUPS["micro"])
def test_round_trip_every_micro_preset(name, tmp_path):
    model = build(preset_spec(name), seed=1)
    a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(model, a, step=4, seed=1)
    save_checkpoint(load_checkpoint(a), b)
    assert open(a, "rb").read() == open(b, "rb").read()
    back = load_checkpoint(a).to_model()
    for k, p in model.params.items():
        assert back.params[k].data.tobytes() == p.data.tobytes()


def test_fields_survive(ckpt):
    back = from_bytes(to_bytes(ckpt))
    assert (back.step, back.seed, back.meta) == (17, 3, {"epoch": 2})
    assert back.spec == ckpt.spec
    for k in ckpt.params:
        assert back.ema[k].tobytes() == ckpt.ema[k].tobytes()
    assert to_bytes(back) == to_bytes(ckpt)


def test_without_ema(ckpt):
    plain = dataclasses.replace(ckpt, ema=None)
    back = from_bytes(to_bytes(plain))
    assert back.ema is None
    with pytest.raises(ValueError, match="EMA"):
        back.to_model(use_ema=True)


@pytest.mark.parametrize("pos,match", [(0, "magic"), (3, "magic"), (4, "version"), (6, "version")])
def test_corrupt_header(ckpt, pos, match):
    buf = bytearray(to_bytes(ckpt))
    buf[pos] ^= 0xFF
    with pytest.raises(ValueError, match=match):
        from_bytes(bytes(buf))


def test_truncated(ckpt):
    buf = to_bytes(ckpt)
    for cut in (6, 40, len(buf) // 2, len(buf) - 1):
        with pytest.raises(ValueError):
            from_bytes(buf[:cut])


def test_trailing_garbage(ckpt):
    with pytest.raises(ValueError, match="trailer"):
        from_bytes(to_bytes(ckpt) + b"\x00")


def test_spec_with_extra_layer(ckpt):
    spec = ckpt.spec
    bigger = dataclasses.replace(spec, stage_depths=(spec.stage_depths[0] + 1,) + tuple(spec.stage_depths[1:]))
    with pytest.raises(KeyError, match=f"blocks\\.{spec.stage_depths[0]}\\."):
        load_into(ckpt, bigger)


def test_missing_parameter(ckpt):
    params = dict(ckpt.params)
    params.pop("head.bias")
    with pytest.raises(KeyError, match="head.bias"):
        from_bytes(to_bytes(Checkpoint(ckpt.spec, params)))


def test_shape_mismatch(ckpt):
    other = dataclasses.replace(ckpt.spec, num_classes=7)
    with pytest.raises(ValueError, match="head.weight"):
        load_into(ckpt, other)


def test_atomic_save_leaves_no_tmp(ckpt, tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(ckpt, str(path))
    assert path.read_bytes()[:4] == MAGIC
    assert not (tmp_path / "x.ckpt.tmp").exists()
