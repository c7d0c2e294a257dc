import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ramf.errors import (
    CorruptPayload,
    InvalidTarget,
    MissingModality,
    MissingRecord,
    NonFiniteValue,
    ShapeMismatch,
    TooFewSamples,
)
from ramf.feature_io import (
    MAGIC,
    DatasetManifest,
    FeatureBundle,
    ModalitySpec,
    decode_bundle,
    desk_specs,
    encode_bundle,
    fit_length,
    generate_synthetic,
    load_bundle,
    load_table,
    full_specs,
    synthetic_bundles,
    write_dataset,
)


def _zero_bundle(specs, vid="v0", label=1):
    return FeatureBundle(vid, {s.name: np.zeros(s.shape, np.float32) for s in specs}, label)


def test_full_specs_shapes():
    t1 = {s.name: s.shape for s in full_specs("T1")}
    assert t1 == {
        "text": (100, 768), "audio": (100, 40), "video": (100, 768),
        "obj_desc": (100, 768), "hate_inf": (100, 768), "nonhate_inf": (100, 768),
    }
    t2_mhc = {s.name: s.shape for s in full_specs("T2", "mhc")}
    assert t2_mhc["audio"] == (100, 512) and t2_mhc["video"] == (32, 512)


def test_spec_rejects_nonpositive():
    with pytest.raises(ValueError):
        ModalitySpec("text", 0, 8)
    with pytest.raises(ValueError):
        ModalitySpec("nope", 4, 8)


def test_zero_bundle_loads_with_stored_label(tmp_path):
    specs = full_specs("T1")
    write_dataset([_zero_bundle(specs, label=0)], specs, tmp_path, "one")
    m = DatasetManifest.load(tmp_path / "manifest.json")
    b = load_bundle(m, "v0")
    assert b.label == 0
    assert all(not v.any() and v.shape == s.shape for s, v in zip(specs, b.features.values()))


def test_short_text_matrix_is_rejected(tmp_path):
    specs = full_specs("T1")
    write_dataset([_zero_bundle(specs)], specs, tmp_path, "one")
    bad = _zero_bundle(specs)
    bad.features["text"] = np.zeros((99, 768), np.float32)
    (tmp_path / "bundles" / "v0.bin").write_bytes(encode_bundle(bad.features, 1))
    m = DatasetManifest.load(tmp_path / "manifest.json")
    with pytest.raises(ShapeMismatch) as exc:
        load_bundle(m, "v0")
    assert "text" in str(exc.value) and "[100, 768]" in str(exc.value)


def test_unknown_id(tmp_path):
    specs = desk_specs(4, 3)
    m = write_dataset([_zero_bundle(specs)], specs, tmp_path, "one")
    with pytest.raises(MissingRecord):
        load_bundle(m, "missing")


def test_nonfinite_rejected(tmp_path):
    specs = desk_specs(4, 3)
    b = _zero_bundle(specs)
    b.features["audio"][2, 1] = np.nan
    with pytest.raises(NonFiniteValue):
        write_dataset([b], specs, tmp_path, "x")


def test_missing_modality_rejected():
    specs = desk_specs(4, 3)
    b = _zero_bundle(specs)
    del b.features["hate_inf"]
    with pytest.raises(MissingModality):
        b.validate(specs)


def test_header_layout_is_byte_exact():
    feats = {"text": np.arange(6, dtype=np.float32).reshape(2, 3)}
    buf = encode_bundle(feats, 1)
    assert buf[:8] == MAGIC
    assert struct.unpack_from("<I", buf, 8)[0] == 1
    assert struct.unpack_from("<III", buf, 12) == (0, 2, 3)
    assert np.frombuffer(buf, "<f4", 6, 24).tolist() == [0, 1, 2, 3, 4, 5]
    assert buf[-1] == 1 and len(buf) == 24 + 24 + 1


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-5],                         # truncated payload
    lambda b: b"XXXXXXXX" + b[8:],           # bad magic
    lambda b: b[:8] + struct.pack("<I", 9) + b[12:],  # unknown version
    lambda b: b[:12] + struct.pack("<III", 0, 50, 3) + b[24:],  # header claims more rows
    lambda b: b[:-1] + b"\x07",              # label byte out of range
    lambda b: b[:12] + struct.pack("<I", 99) + b[16:],  # unknown modality tag
])
def test_corrupt_payloads(mutate):
    buf = encode_bundle({"text": np.ones((2, 3), np.float32)}, 0)
    with pytest.raises(CorruptPayload):
        decode_bundle(mutate(buf))


def test_label_disagreement_with_manifest(tmp_path):
    specs = desk_specs(4, 3)
    write_dataset([_zero_bundle(specs, label=1)], specs, tmp_path, "x")
    raw = json.loads((tmp_path / "manifest.json").read_text())
    raw["records"][0]["label"] = 0
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(CorruptPayload):
        load_bundle(DatasetManifest.load(tmp_path / "manifest.json"), "v0")


def test_duplicate_ids_rejected(tmp_path):
    specs = desk_specs(4, 3)
    with pytest.raises(ValueError):
        write_dataset([_zero_bundle(specs), _zero_bundle(specs)], specs, tmp_path, "dup")


def test_masks_survive_roundtrip(tmp_path):
    specs = desk_specs(5, 2)
    b = _zero_bundle(specs)
    b.mask = {"text": np.array([False, False, False, True, True])}
    m = write_dataset([b], specs, tmp_path, "m")
    assert load_bundle(DatasetManifest.load(tmp_path / "manifest.json"), "v0") == b
    assert m.record("v0").valid_lengths == {"text": 3}


@settings(max_examples=40, deadline=None)
@given(
    text=hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                    elements=st.floats(-1e6, 1e6, width=32)),
    label=st.integers(0, 1),
)
def test_roundtrip_is_bit_exact(text, label):
    feats, lab = decode_bundle(encode_bundle({"text": text, "cot": text[::-1].copy()}, label))
    assert lab == label
    assert feats["text"].tobytes() == text.tobytes()
    assert feats["cot"].tobytes() == text[::-1].tobytes()


def test_save_load_random_bundles(tmp_path):
    specs = desk_specs(7, 3)
    bundles = list(synthetic_bundles(6, specs, 1.0, seed=5))
    m = write_dataset(bundles, specs, tmp_path, "r")
    loaded = [load_bundle(DatasetManifest.load(tmp_path / "manifest.json"), i) for i in m.ids]
    assert loaded == bundles


# -- fit_length -----------------------------------------------------------------


def test_fit_length_pads_with_zeros():
    out = fit_length(np.ones((3, 4)), 5)
    assert out[:3].tolist() == np.ones((3, 4)).tolist() and not out[3:].any()


@pytest.mark.parametrize("mode", ["zero_pad_or_truncate", "stride_downsample"])
def test_fit_length_identity(mode):
    seq = np.arange(5.0)[:, None].repeat(2, 1)
    assert np.array_equal(fit_length(seq, 5, mode), seq)


def test_stride_downsample_index_oracle():
    seq = np.arange(200.0)[:, None].repeat(3, 1)
    out = fit_length(seq, 100, "stride_downsample")
    assert out[:, 0].tolist() == [2.0 * i for i in range(100)]


def test_stride_downsample_rounding_oracle():
    L_src, L = 7, 3
    seq = np.arange(float(L_src))[:, None]
    # round-half-up by integer arithmetic: floor((2*i*L' + L) / (2L))
    expect = [(2 * i * L_src + L) // (2 * L) for i in range(L)]
    assert fit_length(seq, L, "stride_downsample")[:, 0].tolist() == expect


def test_truncate_keeps_head():
    seq = np.arange(10.0)[:, None]
    assert fit_length(seq, 4)[:, 0].tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("target", [0, -3])
def test_invalid_target(target):
    with pytest.raises(InvalidTarget):
        fit_length(np.ones((2, 2)), target)


# -- synthetic data ---------------------------------------------------------------


def test_synthetic_needs_two_samples(tmp_path):
    with pytest.raises(TooFewSamples):
        generate_synthetic(1, desk_specs(10, 4), 3.0, 0, tmp_path)


def test_synthetic_is_byte_identical(tmp_path):
    specs = desk_specs(10, 4)
    generate_synthetic(12, specs, 3.0, 7, tmp_path / "a")
    generate_synthetic(12, specs, 3.0, 7, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synthetic_balanced_and_planted():
    specs = desk_specs(20, 6)
    bundles = list(synthetic_bundles(50, specs, 4.0, seed=3))
    labels = [b.label for b in bundles]
    assert sum(labels) == 25
    # every hate_inf row of a label-1 sample is shifted by 4 * u with |u| = 1
    d =(np.mean([b.features["hate_inf"].mean(0) for b in bundles if b.label == 1], 0)
         - np.mean([b.features["hate_inf"].mean(0) for b in bundles if b.label == 0], 0))
    assert np.linalg.norm(d) == pytest.approx(4.0, rel=0.15)


def _probe_accuracy(x, y, folds=5):
    """Held-out least-squares linear probe accuracy."""
    n = len(y)
    idx = np.arange(n)
    correct = 0
    for k in range(folds):
        test = idx[k::folds]
        train = np.setdiff1d(idx, test)
        X = np.hstack([x, np.ones((n, 1))])
        w, *_ = np.linalg.lstsq(X[train], 2.0 * y[train] - 1, rcond=None)
        correct += int(((X[test] @ w > 0).astype(int) == y[test]).sum())
    return correct / n


def test_linear_probe_on_pooled_text_separates_classes():
    specs = desk_specs(100, 32)
    bundles = list(synthetic_bundles(400, specs, 3.0, seed=2021))
    x = np.stack([b.features["text"].mean(0) for b in bundles]).astype(np.float64)
    y = np.array([b.label for b in bundles])
    assert _probe_accuracy(x, y) > 0.9


def test_no_signal_probe_is_near_chance():
    specs = desk_specs(50, 8)
    bundles = list(synthetic_bundles(400, specs, 0.0, seed=11))
    x = np.stack([b.features["text"].mean(0) for b in bundles]).astype(np.float64)
    y = np.array([b.label for b in bundles])
    assert abs(_probe_accuracy(x, y) - 0.5) < 0.1


def test_load_table_stacks(tmp_path):
    specs = desk_specs(6, 3)
    m = generate_synthetic(8, specs, 1.0, 0, tmp_path)
    table = load_table(m)
    assert table.features["video"].shape == (8, 6, 3)
    sub = table.take(["syn00003", "syn00001"])
    assert sub.ids == ["syn00003", "syn00001"]
    with pytest.raises(MissingRecord):
        table.take(["zzz"])
