import json
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lightcrl import data as D
from lightcrl.errors import ContractError, CorruptionError, DataError, FormatError


def _set(n=4, d1=3, d2=5, labels=True, tag="train", seed=0):
    r = np.random.default_rng(seed)
    lab = np.arange(n) % 3 if labels else None
    return D.PairedEmbeddingSet(r.standard_normal((n, d1)), r.standard_normal((n, d2)), lab, tag)


@pytest.mark.parametrize("kwargs", [dict(labels=False), dict(labels=True), dict(n=1), dict(n=0, labels=False), dict(tag="val")])
def test_round_trip_is_bit_exact(tmp_path, kwargs):
    s = _set(**kwargs)
    p1, p2 = tmp_path / "a.lce", tmp_path / "b.lce"
    D.save_embeddings(s, p1)
    back = D.load_embeddings(p1)
    assert back.m1.tobytes() == s.m1.tobytes() and back.m2.tobytes() == s.m2.tobytes()
    assert back.split_tag == s.split_tag
    assert (back.labels is None) == (s.labels is None)
    if s.labels is not None:
        assert np.array_equal(back.labels, s.labels)
    D.save_embeddings(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_layout(tmp_path):
    p = tmp_path / "x.lce"
    r = np.random.default_rng(0)
    D.save_embeddings(D.PairedEmbeddingSet(r.standard_normal((2, 3)), r.standard_normal((2, 4))), p)
    raw = p.read_bytes()
    assert raw[:4] == b"LCE1"
    assert struct.unpack_from("<IIII", raw, 4) == (1, 2, 3, 4)
    assert len(raw) == 24 + 4 * 2 * (3 + 4)
    s = D.load_embeddings(p)
    assert (s.n, s.d1, s.d2) == (2, 3, 4)


def test_bad_magic_version_truncation_and_nan(tmp_path):
    p = tmp_path / "x.lce"
    D.save_embeddings(_set(), p)
    raw = bytearray(p.read_bytes())

    bad = tmp_path / "bad.lce"
    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        D.load_embeddings(bad)
    v2 = bytearray(raw)
    v2[4] = 2
    bad.write_bytes(bytes(v2))
    with pytest.raises(FormatError, match="version"):
        D.load_embeddings(bad)
    bad.write_bytes(bytes(raw[:-3]))
    with pytest.raises(CorruptionError):
        D.load_embeddings(bad)
    bad.write_bytes(bytes(raw[:10]))
    with pytest.raises(CorruptionError):
        D.load_embeddings(bad)

    nan = bytearray(raw)
    off = 24 + 4 * (2 * 3 + 1)  # row 2, column 1 of m1
    nan[off : off + 4] = struct.pack("<f", float("nan"))
    bad.write_bytes(bytes(nan))
    with pytest.raises(DataError) as info:
        D.load_embeddings(bad)
    assert info.value.row == 2 and "row 2" in str(info.value)


def test_set_validation():
    with pytest.raises(ContractError):
        D.PairedEmbeddingSet(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        D.PairedEmbeddingSet(np.zeros((2, 3)), np.zeros((2, 3)), labels=[0])
    with pytest.raises(DataError):
        D.PairedEmbeddingSet(np.zeros((2, 3)), np.zeros((2, 3)), labels=[0, -1])
    with pytest.raises(ContractError):
        D.PairedEmbeddingSet(np.zeros((2, 3)), np.zeros((2, 3)), split_tag="dev")


def test_jsonl_conversion(tmp_path):
    lines = [json.dumps({"m1": [1, 2], "m2": [3, 4, 5], "label": i}) for i in range(3)]
    s = D.jsonl_to_set(lines)
    assert (s.n, s.d1, s.d2) == (3, 2, 3) and s.labels.tolist() == [0, 1, 2]
    src, dst = tmp_path / "a.jsonl", tmp_path / "a.lce"
    src.write_text("\n".join(lines) + "\n")
    D.convert_jsonl(src, dst)
    assert np.array_equal(D.load_embeddings(dst).m2, s.m2)
    with pytest.raises((ContractError, DataError)):
        D.jsonl_to_set([lines[0], json.dumps({"m1": [1, 2], "m2": [3, 4, 5]})])


SPEC = D.SyntheticSpec(n=512, d_latent=8, d1=32, d2=48, noise_sigma=0.1, num_classes=10, seed=7)


def test_generator_is_pure(tmp_path):
    a, b = D.generate_synthetic(SPEC), D.generate_synthetic(SPEC)
    assert a.m1.tobytes() == b.m1.tobytes() and a.m2.tobytes() == b.m2.tobytes()
    c = D.generate_synthetic(D.SyntheticSpec(**{**SPEC.__dict__, "seed": 8}))
    assert not np.array_equal(a.m1, c.m1)


def test_generator_labels_round_robin():
    s = D.generate_synthetic(SPEC)
    assert s.labels[:12].tolist() == [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]
    assert np.bincount(s.labels).min() >= 51


def test_generator_latent_structure():
    s, world = D.generate_synthetic(SPEC, return_world=True)
    # noise-free part is exactly A z
    assert np.allclose(s.m1, world.latents @ world.a1.T, atol=1.0)
    resid = s.m1.astype(np.float64) - world.latents @ world.a1.T
    assert abs(resid.std() - SPEC.noise_sigma) < 0.01


def test_generator_sigma_zero_degeneracy():
    spec = D.SyntheticSpec(n=2, d_latent=3, d1=4, d2=5, noise_sigma=0.0, num_classes=1, seed=3)
    s, world = D.generate_synthetic(spec, return_world=True)
    same_latent = np.array_equal(world.latents[0], world.latents[1])
    assert np.array_equal(s.m1[0], s.m1[1]) == same_latent
    # with sigma=0 each row is a deterministic function of its latent
    assert np.allclose(s.m1, world.latents @ world.a1.T, atol=1e-6)


def test_generator_cross_modal_nearest_neighbour_sanity():
    s, world = D.generate_synthetic(SPEC, return_world=True)
    # least-squares back to latent space from each side, then brute-force nearest neighbour
    z1 = np.linalg.lstsq(world.a1, s.m1.T.astype(np.float64), rcond=None)[0].T
    z2 = np.linalg.lstsq(world.a2, s.m2.T.astype(np.float64), rcond=None)[0].T
    d = ((z1[:, None, :] - z2[None, :, :]) ** 2).sum(axis=2)
    assert np.mean(d.argmin(axis=1) == np.arange(s.n)) >= 0.95


def test_spec_validation():
    with pytest.raises(ContractError):
        D.generate_synthetic(D.SyntheticSpec(n=0, d_latent=2, d1=3, d2=3))
    with pytest.raises(ContractError):
        D.generate_synthetic(D.SyntheticSpec(n=4, d_latent=2, d1=0, d2=3))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        D.generate_synthetic(D.SyntheticSpec(n=4, d_latent=6, d1=3, d2=8))
    assert any("d_latent" in str(w.message) for w in caught)


def test_class_prototypes_are_noise_free_class_means():
    protos = D.class_prototypes(SPEC)
    _, world = D.generate_synthetic(SPEC, return_world=True)
    assert protos.n == 10 and protos.labels.tolist() == list(range(10))
    assert np.allclose(protos.m2, (world.class_means @ world.a2.T).astype(np.float32))


def test_split_set_and_standard_synthetic():
    spec, train, test = D.standard_synthetic()
    assert (train.n, test.n, train.split_tag, test.split_tag) == (512, 128, "train", "test")
    full = D.generate_synthetic(D.SyntheticSpec(n=640, d_latent=8, d1=32, d2=48, seed=7))
    assert np.array_equal(np.concatenate([train.m1, test.m1]), full.m1)
    with pytest.raises(ContractError):
        D.split_set(train, (500, 100))


def test_sample_minibatch_examples():
    s = _set(n=10)
    r = np.random.default_rng(0)
    x1, x2, idx = D.sample_minibatch(s, 10, r)
    assert sorted(idx.tolist()) == list(range(10))
    assert np.array_equal(x1, s.m1[idx]) and np.array_equal(x2, s.m2[idx])
    x1, x2, idx = D.sample_minibatch(s, 1, r)
    assert x1.shape == (1, 3) and np.array_equal(x2[0], s.m2[idx[0]])
    with pytest.raises(ContractError):
        D.sample_minibatch(s, 11, r)
    with pytest.raises(ContractError):
        D.sample_minibatch(s, 0, r)


@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 1000))
def test_epoch_batches_partition(n, k, seed):
    k = min(k, n)
    batches = D.epoch_batches(n, k, np.random.default_rng(seed))
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(n))
    assert all(len(b) == k for b in batches[:-1])
    assert len(batches[-1]) == (n % k or k)
    assert len(batches) == -(-n // k)


def test_subset_keeps_alignment():
    s = _set(n=6)
    sub = s.subset([5, 0], "test")
    assert np.array_equal(sub.m1, s.m1[[5, 0]]) and sub.labels.tolist() == [s.labels[5], s.labels[0]]
    assert sub.split_tag == "test"


