import numpy as np
import pytest

from ekd import losses as L
from ekd import tensor as T
from ekd.nn import (
    AttachmentError,
    BackboneSpec,
    GuidedModuleSpec,
    SpecError,
    Stream,
    attachment_points,
    build_backbone,
    build_guided_module,
    conv_blocks,
    forward_collect,
    export_backbone,
    guided_spec_for,
    preset,
)


def toy_spec(m=10):
    return BackboneSpec(conv_blocks((8, 16, 32)), final_feature_dim=32, num_classes=m)


def images(n, res=32, seed=0, dtype=np.float32):
    return T.Tensor(np.random.default_rng(seed).standard_normal((n, 3, res, res)).astype(dtype))


def test_toy_shape_chain():
    assert toy_spec().shape_chain() == [(8, 16), (16, 8), (32, 4)]


def test_single_block_rejected():
    spec = BackboneSpec(conv_blocks((8,)), final_feature_dim=8, num_classes=10)
    with pytest.raises(SpecError):
        spec.shape_chain()
    with pytest.raises(SpecError):
        build_backbone(spec, 0)


def test_feature_dim_mismatch_rejected():
    with pytest.raises(SpecError):
        BackboneSpec(conv_blocks((8, 16)), final_feature_dim=32, num_classes=10).shape_chain()


def test_pool_downsampling_gives_same_chain():
    spec = BackboneSpec(conv_blocks((8, 16, 32), downsample="pool"), final_feature_dim=32, num_classes=10)
    assert [s for _, s in spec.shape_chain()] == [16, 8, 4]


def test_spec_roundtrip():
    spec = preset("small-teacher", 10)
    assert BackboneSpec.from_dict(spec.to_dict()) == spec


def test_same_seed_same_parameters():
    a, b = Stream(toy_spec(), 7), Stream(toy_spec(), 7)
    sa, sb = a.state(), b.state()
    assert sa.keys() == sb.keys()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    c = Stream(toy_spec(), 8)
    assert any(sa[k].tobytes() != c.state()[k].tobytes() for k in sa)


def test_forward_collect_shapes():
    stream = Stream(toy_spec(5), 0)
    outs = stream.collect(images(2), training=True)
    assert outs.num_heads == 2
    assert outs.backbone_logits.shape == (2, 5)
    assert [l.shape for l in outs.guided_logits] == [(2, 5), (2, 5)]
    assert all(f.shape == outs.backbone_feature.shape == (2, 32) for f in outs.guided_features)


def test_eval_mode_is_deterministic():
    stream = Stream(toy_spec(), 0)
    x = images(3)
    a = stream.collect(x, training=False)
    b = stream.collect(x, training=False)
    assert a.backbone_logits.data.tobytes() == b.backbone_logits.data.tobytes()
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.guided_logits, b.guided_logits))


def test_guided_module_shapes():
    spec = GuidedModuleSpec(in_channels=16, in_spatial=16, out_spatial=4, reduce_channels=8,
                            out_feature_dim=32, num_classes=10)
    head = build_guided_module(spec, 0, backbone_feature_dim=32)
    feature, logits = head(T.Tensor(np.ones((2, 16, 16, 16), np.float32)))
    assert feature.shape == (2, 32) and logits.shape == (2, 10)
    assert spec.stage_count() == 2


def test_guided_module_keeps_full_bottleneck_at_final_resolution():
    spec = GuidedModuleSpec(32, 4, 4, 16, 32, 10)
    head = build_guided_module(spec, 0)
    assert spec.stage_count() == 0
    convs = [l for l in head.body.layers if type(l).__name__ == "Conv2d"]
    assert len(convs) == 2


def test_guided_module_rejects_wrong_input():
    head = build_guided_module(GuidedModuleSpec(16, 8, 4, 8, 32, 10), 0)
    with pytest.raises(AttachmentError):
        head(images(2, 8))


def test_guided_dim_must_match_backbone():
    with pytest.raises(SpecError):
        build_guided_module(GuidedModuleSpec(16, 8, 4, 8, 24, 10), 0, backbone_feature_dim=32)


def test_default_reduce_channels():
    spec = toy_spec()
    assert guided_spec_for(spec, 0).reduce_channels == 4
    assert guided_spec_for(spec, 1).reduce_channels == 8


def test_attachment_points_deepest_first():
    assert attachment_points(4, None) == [0, 1, 2]
    assert attachment_points(4, 1) == [2]
    assert attachment_points(4, 0) == []
    with pytest.raises(SpecError):
        attachment_points(3, 3)


def test_guided_heads_are_side_branches():
    with_heads = Stream(toy_spec(), 3)
    without = Stream(toy_spec(), 3, guided=False)
    x = images(4)
    a = with_heads.collect(x, training=False).backbone_logits.data
    b = without.collect(x, training=False).backbone_logits.data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("block", [0, 1])
def test_head_gradient_reaches_its_block_only(block):
    stream = Stream(toy_spec(), 1)
    outs = stream.collect(images(4), training=True)
    i = outs.guided_blocks.index(block)
    L.cross_entropy(outs.guided_logits[i], np.array([0, 1, 2, 3])).backward()
    params = dict(stream.named_parameters())
    for name, p in params.items():
        if name.startswith("backbone.blocks."):
            b = int(name.split(".")[2])
            if b <= block:
                assert p.grad is not None and np.any(p.grad != 0), name
            else:
                assert p.grad is None, name
        elif name.startswith("backbone.fc"):
            assert p.grad is None
        elif name.startswith(f"guided.{block}."):
            assert p.grad is not None


def test_export_fidelity_and_size():
    stream = Stream(toy_spec(), 2)
    # move running stats away from their initial values
    stream.collect(images(8, seed=1), training=True)
    exported = export_backbone(stream.backbone)
    x = images(100, seed=2)
    full = stream.collect(x, training=False).backbone_logits.data
    assert exported(x).data.tobytes() == full.tobytes()
    assert exported.num_parameters() < stream.num_parameters()
    assert not any(n.startswith("guided") for n in exported.state())


def test_exported_backbone_has_no_heads_for_guided_losses():
    exported = export_backbone(Stream(toy_spec(), 2))
    outs = forward_collect(exported, [None, None], images(2), training=False)
    with pytest.raises(L.LossContractError):
        L.within_stream_loss(outs, 4.0)


def test_wrong_input_shape_rejected():
    with pytest.raises(T.ShapeError):
        Stream(toy_spec(), 0).collect(images(2, res=16), training=False)


def test_state_roundtrip_and_strict_load():
    a, b = Stream(toy_spec(), 1), Stream(toy_spec(), 2)
    b.load_state(a.state())
    assert all(a.state()[k].tobytes() == v.tobytes() for k, v in b.state().items())
    bad = dict(a.state())
    bad.pop(next(iter(bad)))
    with pytest.raises(KeyError):
        b.load_state(bad)


def test_batch_norm_not_decayed():
    exempt = Stream(toy_spec(), 0).decay_exempt()
    assert exempt and all(".scale" in n or ".shift" in n for n in exempt)
