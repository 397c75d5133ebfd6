import math

import numpy as np
import pytest

from attxnet import data
from attxnet import model as M
from attxnet import numerics as nx
from attxnet.attx import TYPE_III
from attxnet.errors import ArchiveError, ConfigurationError
from attxnet.numerics import Tensor

SMALL = dict(encoder="vgg", width=0.125, fc_widths=(16, 8))


def cfg(**kw):
    base = dict(modalities=("A", "B"), seed=3, **SMALL)
    base.update(kw)
    return M.PipelineConfig(**base)


def batch(rng, n=3, channels=(1, 1), length=2560):
    return [rng.standard_normal((n, c, length)) for c in channels]


# --------------------------------------------------------------------------
# config and assembly


def test_stage_four_rejected():
    with pytest.raises(ConfigurationError, match="stages 1-3 only"):
        cfg(attx_stages={4}, connection_type="II").validate()


def test_other_config_errors():
    with pytest.raises(ConfigurationError):
        cfg(attx_stages={2}).validate()  # no type
    with pytest.raises(ConfigurationError):
        cfg(num_classes=1).validate()
    with pytest.raises(ConfigurationError):
        cfg(loss="hinge").validate()
    with pytest.raises(ConfigurationError, match="minimum input length"):
        cfg(segment_length=500).validate()
    with pytest.raises(ConfigurationError):
        M.PipelineConfig.from_dict({"modalities": ["A"], "colour": "red"})


def test_config_round_trip():
    c = cfg(attx_stages={1, 3}, connection_type="1<->2", loss="focal")
    again = M.PipelineConfig.from_dict(c.to_dict())
    assert again == c
    assert c.type_label == "1<->2" and c.stages_label == "[1,3]"
    assert cfg().type_label == "none"


def test_baseline_has_no_attx_parameters():
    model = M.build_pipeline(cfg())
    assert not any(name.startswith("attx") for name in model.named_parameters())


def test_three_stage_type_three_has_three_blocks():
    model = M.build_pipeline(cfg(attx_stages={1, 2, 3}, connection_type=TYPE_III))
    names = model.named_parameters()
    for stage in (1, 2, 3):
        assert f"attx{stage}.W" in names and f"attx{stage}.w_u" in names
    ws = [names[f"attx{s}.W"].data for s in (1, 2, 3)]
    assert not np.array_equal(ws[0], ws[1])


def test_channel_bookkeeping():
    base = M.build_pipeline(cfg())
    m3 = M.build_pipeline(cfg(attx_stages={1}, connection_type="III"))
    m2 = M.build_pipeline(cfg(attx_stages={1}, connection_type="II"))
    assert [m3.in_channels[i][1] for i in range(2)] == [2 * base.in_channels[0][1]] * 2
    assert [m2.in_channels[i][1] for i in range(2)] == [2 * base.in_channels[0][1], base.in_channels[1][1]]


def test_forward_shape_determinism_and_probabilities(rng):
    model = M.build_pipeline(cfg(attx_stages={2}, connection_type="II", num_classes=3))
    x = batch(rng)
    a = model.forward(x, "train").data
    b = model.forward(x, "train").data
    assert a.shape == (3, 3)
    np.testing.assert_array_equal(a, b)
    p = M.predict_proba(model, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_modality_count_mismatch(rng):
    model = M.build_pipeline(cfg())
    with pytest.raises(ConfigurationError, match="expects 2 modalities"):
        model.forward(batch(rng)[:1])


def test_same_seed_same_parameters():
    a = M.build_pipeline(cfg(attx_stages={2}, connection_type="II")).state_arrays()
    b = M.build_pipeline(cfg(attx_stages={2}, connection_type="II")).state_arrays()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_baseline_branches_are_isolated(rng):
    model = M.build_pipeline(cfg())
    x = batch(rng)
    taps_a, taps_b = {}, {}
    model.embed(x, "eval", taps_a)
    x_zero = [x[0], np.zeros_like(x[1])]
    model.embed(x_zero, "eval", taps_b)
    np.testing.assert_array_equal(taps_a["heads"][0].data, taps_b["heads"][0].data)
    assert not np.array_equal(taps_a["heads"][1].data, taps_b["heads"][1].data)
    for stage in range(1, 5):
        np.testing.assert_array_equal(taps_a[f"stage{stage}"][0].data, taps_b[f"stage{stage}"][0].data)


def test_attx_couples_branches(rng):
    model = M.build_pipeline(cfg(attx_stages={1}, connection_type="II"))
    x = batch(rng)
    taps_a, taps_b = {}, {}
    model.embed(x, "eval", taps_a)
    model.embed([x[0], np.zeros_like(x[1])], "eval", taps_b)
    assert not np.array_equal(taps_a["heads"][0].data, taps_b["heads"][0].data)


def test_type_three_modality_permutation(rng):
    c = cfg(attx_stages={1, 2}, connection_type="III")
    model = M.build_pipeline(c)
    swapped = M.build_pipeline(cfg(attx_stages={1, 2}, connection_type="III", modalities=("B", "A")))
    # parameters are named by modality for branches; relabel and permute the rest
    arrays = model.state_arrays()
    new = {}
    for name, arr in arrays.items():
        if name.startswith("A."):
            new["A." + name[2:]] = arr
        elif name.startswith("B."):
            new["B." + name[2:]] = arr
        elif name.endswith(".W"):
            new[name] = arr[::-1, ::-1].copy()
        elif name == "classifier.weight":
            half = arr.shape[0] // 2
            new[name] = np.concatenate([arr[half:], arr[:half]])
        else:
            new[name] = arr
    swapped.load_state_arrays(new)
    x = batch(rng)
    a = model.forward(x, "eval").data
    b = swapped.forward(x[::-1], "eval").data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_resnet_pipeline_runs(rng):
    model = M.build_pipeline(cfg(encoder="resnet", attx_stages={3}, connection_type="I"))
    out = model.forward(batch(rng, n=2), "train")
    assert out.shape == (2, 2)
    out_eval = model.forward(batch(rng, n=2), "eval")
    assert np.all(np.isfinite(out_eval.data))


def test_multichannel_modalities(rng):
    model = M.build_pipeline(cfg(modality_channels=(2, 1), attx_stages={1}, connection_type="III"))
    assert model.forward(batch(rng, channels=(2, 1))).shape == (3, 2)


# --------------------------------------------------------------------------
# losses


def test_cross_entropy_uniform():
    loss = M.cross_entropy_loss(Tensor(np.zeros((4, 2))), [0, 1, 1, 0])
    assert math.isclose(loss.item(), math.log(2), rel_tol=1e-15)


def test_cross_entropy_confident():
    loss = M.cross_entropy_loss(Tensor([[50.0, -50.0], [-50.0, 50.0]]), [0, 1])
    assert loss.item() < 1e-40


def test_label_range_checked():
    with pytest.raises(ConfigurationError):
        M.cross_entropy_loss(Tensor(np.zeros((2, 2))), [0, 2])
    with pytest.raises(ConfigurationError):
        M.focal_loss(Tensor(np.zeros((2, 2))), [-1, 0])


def test_focal_values():
    assert M.focal_loss(Tensor([[60.0, -60.0]]), [0]).item() == pytest.approx(0.0, abs=1e-40)
    loss = M.focal_loss(Tensor(np.zeros((1, 2))), [1], alpha=4.0, gamma=2.0)
    assert math.isclose(loss.item(), 4 * 0.25 * math.log(2), rel_tol=1e-14)


def test_focal_degenerates_to_cross_entropy(rng):
    for _ in range(20):
        logits = Tensor(rng.standard_normal((8, 3)) * 3)
        labels = rng.integers(0, 3, 8)
        a = M.focal_loss(logits, labels, alpha=1.0, gamma=0.0).item()
        b = M.cross_entropy_loss(logits, labels).item()
        assert abs(a - b) <= 1e-12


def test_loss_gradients(rng):
    labels = rng.integers(0, 3, 5)
    x = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    nx.gradcheck(lambda x: M.cross_entropy_loss(x, labels), [x])
    nx.gradcheck(lambda x: M.focal_loss(x, labels), [x])


# --------------------------------------------------------------------------
# checkpoints and embeddings


def test_checkpoint_round_trip(tmp_path, rng):
    model = M.build_pipeline(cfg(encoder="resnet", attx_stages={2}, connection_type="III"))
    x = batch(rng, n=2)
    model.forward(x, "train")  # seeds batchnorm running statistics
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(model, path, extra={"note": 1})
    loaded, extra = M.load_checkpoint(path)
    assert extra == {"note": 1}
    np.testing.assert_array_equal(model.forward(x, "eval").data, loaded.forward(x, "eval").data)


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(ArchiveError) as e:
        M.load_checkpoint(bad)
    assert e.value.code == ArchiveError.BAD_MAGIC


def test_export_embeddings(tmp_path):
    ds = data.synth_generate(0, 2, 3, "independent")
    model = M.build_pipeline(cfg())
    path = tmp_path / "emb.csv"
    rows = M.export_embeddings(model, ds, path)
    assert len(rows) == len(ds)
    assert all(r[3].shape == (16,) for r in rows)
    again = tmp_path / "emb2.csv"
    M.export_embeddings(model, ds, again)
    assert path.read_bytes() == again.read_bytes()
    header = path.read_text().splitlines()[0].split(",")
    assert header[:3] == ["sample_id", "subject", "label"] and len(header) == 3 + 16


def test_full_width_embedding_size():
    model = M.build_pipeline(M.PipelineConfig(modalities=("A", "B"), width=0.125, fc_widths=(512, 256)))
    assert model.embedding_size == 512
