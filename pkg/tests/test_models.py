import numpy as np
import pytest

from abat import autodiff as ad
from abat.models import (
    FAMILIES,
    ArchSpec,
    CheckpointError,
    ModeError,
    build,
    load_checkpoint,
    round_to_storage,
    save_checkpoint,
    with_seed,
)

@pytest.mark.parametrize("family", FAMILIES)
def test_desk_models_produce_logits(family):
    model = build(ArchSpec.desk(family)).eval()
    x = np.random.default_rng(0).standard_normal((5, 8, 128))
    assert model.predict(x).shape == (5, 4)
    assert model.predict(x[0]).shape == (1, 4)
    with pytest.raises(ad.ShapeError):
        model.predict(np.ones((2, 7, 128)))


def test_same_seed_same_weights_and_seed_changes_them():
    a, b = build(ArchSpec.desk("eegnet", seed=3)), build(ArchSpec.desk("eegnet", seed=3))
    c = build(with_seed(ArchSpec.desk("eegnet"), 4))
    for k, v in a.state().items():
        np.testing.assert_array_equal(v, b.state()[k])
    assert any(not np.array_equal(v, c.state()[k]) for k, v in a.state().items())


def test_predict_refuses_train_mode():
    model = build(ArchSpec.desk("eegnet")).train(np.random.default_rng(0))
    with pytest.raises(ModeError):
        model.predict(np.zeros((1, 8, 128)))
    with model.evaluating():
        model.predict(np.zeros((1, 8, 128)))
    assert model.training


def test_eval_mode_is_deterministic_and_batch_independent():
    model = build(ArchSpec.desk("deep")).eval()
    x = np.random.default_rng(1).standard_normal((8, 8, 128))
    full = model.predict(x)
    np.testing.assert_allclose(model.predict(x[2:3]), full[2:3], atol=1e-10)
    np.testing.assert_array_equal(model.predict(x), full)


def test_too_short_input_names_failing_layer():
    with pytest.raises(ad.ShapeError, match="pool2|classifier|separable"):
        build(ArchSpec.desk("eegnet", timepoints=16))
    with pytest.raises(ad.ShapeError, match="deep"):
        build(ArchSpec.desk("deep", timepoints=20))


def test_invalid_arch():
    with pytest.raises(ValueError):
        ArchSpec.desk("transformer")
    with pytest.raises(ValueError):
        ArchSpec.desk("eegnet", classes=1)
    spec = ArchSpec.desk("shallow")
    assert ArchSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("family", FAMILIES)
def test_checkpoint_round_trip(tmp_path, family):
    model = build(ArchSpec.desk(family, seed=2)).train(np.random.default_rng(0))
    model.forward(np.random.default_rng(1).standard_normal((4, 8, 128)))  # moves BN buffers
    model.eval()
    path = save_checkpoint(tmp_path / "m.abm", model, {"note": "x"})
    loaded, meta = load_checkpoint(path, expected_arch=model.arch)
    assert meta == {"note": "x"} and not loaded.training
    for k, v in model.state().items():
        np.testing.assert_allclose(loaded.state()[k], v, rtol=1e-7, atol=1e-7)
    x = np.random.default_rng(2).standard_normal((3, 8, 128))
    round_to_storage(model)
    np.testing.assert_array_equal(loaded.predict(x), model.predict(x))


def test_checkpoint_corruption(tmp_path):
    model = build(ArchSpec.desk("eegnet"))
    path = save_checkpoint(tmp_path / "m.abm", model)
    raw = path.read_bytes()
    bad = tmp_path / "bad.abm"
    bad.write_bytes(b"NOTAMDL" + raw[7:])
    with pytest.raises(CheckpointError, match="not an ABATMDL"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    tail = bytearray(raw)
    tail[-4:] = np.array([np.inf], dtype="<f4").tobytes()
    bad.write_bytes(bytes(tail))
    with pytest.raises(CheckpointError, match="non-finite"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, expected_arch=ArchSpec.desk("eegnet", classes=2))
    load_checkpoint(path, expected_arch=with_seed(model.arch, 9))


def test_load_state_rejects_mismatches():
    model = build(ArchSpec.desk("eegnet"))
    state = model.state()
    del state[next(iter(state))]
    with pytest.raises(CheckpointError, match="missing"):
        model.load_state(state)
