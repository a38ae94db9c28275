import hashlib
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from atha.analysis import domain_cka
from atha.data import (DomainSpec, augment, decode_tensor, domain_transform, encode_tensor,
                       episode_seed, gen_synthetic_domains, load_dataset, read_tensor, sample_episode,
                       save_dataset, write_tensor)
from atha.errors import ConfigError, FormatError, SamplingError

# --------------------------------------------------------------------------
# container


def test_hex_dump_reference():
    # hand-assembled: magic, u16 version 1, u8 rank 2, dims 2 and 1, then 1.0 and -2.5 as f64 LE
    ref = bytes.fromhex(
        "41544844" "0100" "02" "02000000" "01000000"
        "000000000000f03f" "00000000000004c0")
    assert encode_tensor(np.array([[1.0], [-2.5]])) == ref
    assert np.array_equal(decode_tensor(ref), [[1.0], [-2.5]])


def test_scalar_container():
    buf = encode_tensor(np.float64(3.0))
    assert buf == b"ATHD\x01\x00\x00" + bytes.fromhex("0000000000000840")
    assert decode_tensor(buf).shape == ()


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_round_trip_bit_exact(a):
    b = decode_tensor(encode_tensor(a))
    assert b.shape == a.shape and b.tobytes() == np.ascontiguousarray(a).tobytes()


def test_file_round_trip(tmp_path, rng):
    a = rng.normal(size=(3, 4, 5))
    write_tensor(tmp_path / "a.athd", a)
    assert read_tensor(tmp_path / "a.athd").tobytes() == a.tobytes()


@pytest.mark.parametrize("cut, offset", [(2, 2), (6, 6), (10, 10), (19, 19), (30, 30)])
def test_truncation_offsets(cut, offset):
    buf = encode_tensor(np.arange(4.0).reshape(2, 2))  # 7 + 8 header, 32 payload
    with pytest.raises(FormatError) as err:
        decode_tensor(buf[:cut])
    assert err.value.offset == offset


def test_bad_magic_and_version():
    buf = bytearray(encode_tensor(np.zeros(2)))
    with pytest.raises(FormatError) as err:
        decode_tensor(b"XTHD" + bytes(buf[4:]))
    assert err.value.offset == 0
    buf[4] = 2
    with pytest.raises(FormatError) as err:
        decode_tensor(bytes(buf))
    assert err.value.offset == 4


def test_trailing_bytes():
    buf = encode_tensor(np.zeros(2))
    with pytest.raises(FormatError) as err:
        decode_tensor(buf + b"\x00")
    assert err.value.offset == len(buf)


# --------------------------------------------------------------------------
# generation


def test_zero_shift_target_equals_source():
    src, tgt = gen_synthetic_domains(DomainSpec(images_per_class=5, shift=0.0), 2)
    assert np.array_equal(src.images, tgt.images)
    assert np.array_equal(src.labels, tgt.labels)


def test_generation_deterministic():
    a = gen_synthetic_domains(DomainSpec(images_per_class=4), 9)
    b = gen_synthetic_domains(DomainSpec(images_per_class=4), 9)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()


@pytest.mark.parametrize("shift", [-0.1, 1.5])
def test_shift_out_of_range(shift):
    with pytest.raises(ConfigError):
        DomainSpec(shift=shift)


def test_transform_identity_at_zero(rng):
    img = rng.normal(size=(3, 8, 8))
    assert np.array_equal(domain_transform(img, 0.0), img)


def test_transform_grows_with_shift(rng):
    img = rng.uniform(size=(3, 32, 32))
    dist = [np.abs(domain_transform(img, s) - img).mean() for s in (0.25, 0.5, 1.0)]
    assert dist[0] < dist[1] < dist[2]


def test_classes_flip_invariant():
    """Flipping is used as augmentation, so it must not change the class."""
    from atha.data import default_classes
    kinds = {(c["kind"], c.get("orientation")) for c in default_classes()}
    assert kinds <= {("grating", 0), ("grating", 90), ("ring", None), ("blobs", None)}


def test_dataset_dir_round_trip(tmp_path):
    spec = DomainSpec(images_per_class=3)
    src, tgt = gen_synthetic_domains(spec, 5)
    save_dataset(tgt, tmp_path / "t")
    manifest = json.loads((tmp_path / "t" / "manifest.json").read_text())
    assert len(manifest["classes"]) == len(spec.classes)
    assert manifest["counts"] == {str(c): 3 for c in range(len(spec.classes))}
    assert manifest["shift"] == spec.shift and manifest["seed"] == 5
    back = load_dataset(tmp_path / "t")
    assert back.images.tobytes() == tgt.images.tobytes() and back.domain_tag == "target"


def test_dataset_manifest_hash_stable(tmp_path):
    spec = DomainSpec(images_per_class=2)
    digests = []
    for run in ("a", "b"):
        save_dataset(gen_synthetic_domains(spec, 1)[0], tmp_path / run)
        digests.append(hashlib.sha256((tmp_path / run / "manifest.json").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


# --------------------------------------------------------------------------
# episodes


@pytest.fixture(scope="module")
def target():
    return gen_synthetic_domains(DomainSpec(images_per_class=20, image_size=16), 4)[1]


def test_episode_sizes(target):
    ep = sample_episode(target, 5, 1, 15, 0)
    assert len(ep.support_labels) == 5 and len(ep.query_labels) == 75
    assert ep.support_images.shape == (5, 3, 16, 16)


def test_episode_deterministic(target):
    a, b = sample_episode(target, 5, 5, 15, 8), sample_episode(target, 5, 5, 15, 8)
    assert a.class_ids == b.class_ids
    assert np.array_equal(a.support_index, b.support_index) and np.array_equal(a.query_index, b.query_index)


def test_thousand_episodes_counts_and_disjointness(target):
    for i in range(1000):
        n, k, m = 5, 1 + i % 5, 15 - i % 5
        ep = sample_episode(target, n, k, m, episode_seed(3, i))
        assert len(set(ep.class_ids)) == n
        assert np.array_equal(np.bincount(ep.support_labels, minlength=n), [k] * n)
        assert np.array_equal(np.bincount(ep.query_labels, minlength=n), [m] * n)
        assert not set(ep.support_index.tolist()) & set(ep.query_index.tolist())
        assert len(set(ep.query_index.tolist())) == n * m
        # local labels follow class_ids
        assert np.array_equal(target.labels[ep.support_index], np.asarray(ep.class_ids)[ep.support_labels])
        assert np.array_equal(target.labels[ep.query_index], np.asarray(ep.class_ids)[ep.query_labels])


def test_insufficient_images_names_class(target):
    with pytest.raises(SamplingError, match="class"):
        sample_episode(target, 5, 10, 15, 0)
    with pytest.raises(SamplingError):
        sample_episode(target, 13, 1, 1, 0)


def test_episode_seed_depends_on_index_only():
    assert episode_seed(0, 5) == episode_seed(0, 5)
    assert len({episode_seed(0, i) for i in range(100)}) == 100


def test_augment_shapes_and_determinism(rng):
    imgs = rng.normal(size=(4, 3, 16, 16))
    a = augment(imgs, np.random.default_rng(1))
    b = augment(imgs, np.random.default_rng(1))
    assert a.shape == imgs.shape and np.array_equal(a, b)


def test_augment_zero_padding_is_flip_only(rng):
    imgs = rng.normal(size=(64, 3, 8, 8))
    out = augment(imgs, np.random.default_rng(0), padding=0)
    flipped = np.all(out == imgs[..., ::-1], axis=(1, 2, 3))
    same = np.all(out == imgs, axis=(1, 2, 3))
    assert np.all(flipped | same) and flipped.any() and same.any()


# --------------------------------------------------------------------------
# shift is visible to the pretrained model


def test_larger_shift_lowers_domain_cka(desk_pretrained):
    model, _ = desk_pretrained
    means = {}
    for shift in (0.0, 1.0):
        vals = []
        for seed in range(10):
            src, tgt = gen_synthetic_domains(DomainSpec(images_per_class=20, shift=shift), 100 + seed)
            vals.append(domain_cka(model, src, tgt, 200, seed).value)
        means[shift] = float(np.mean(vals))
    assert means[1.0] < means[0.0]
