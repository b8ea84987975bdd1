import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from oracles import bilinear_resize
from ppdeid.data import (
    FaceImage,
    GroupKey,
    ManifestRecord,
    PairSample,
    load_image,
    load_manifest,
    partition_groups,
    sample_pairs,
    save_image,
    split_train_test,
)
from ppdeid.errors import (
    DecodeError,
    EmptyGroupWarning,
    EmptyManifest,
    InfeasiblePositives,
    MissingFile,
    SchemaMismatch,
    ShapeMismatch,
    TooFewSubjects,
)


def write_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    return path


@pytest.fixture
def manifest_dir(tmp_path):
    for i in range(3):
        write_png(tmp_path / f"img{i}.png", np.full((128, 128), 40 * i, dtype=np.uint8))
    return tmp_path


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


HEADER = ("image_path", "subject_id", "gender", "race", "age")


def test_manifest_three_rows(manifest_dir):
    rows = [(f"img{i}.png", f"s{i}", "male", "black", 20 + i) for i in range(3)]
    m = load_manifest(write_csv(manifest_dir / "m.csv", HEADER, rows))
    assert len(m) == 3
    assert not m.failures
    assert m[0].subject_id == "s0" and m[2].age == 22


def test_manifest_missing_age_column(manifest_dir):
    rows = [(f"img{i}.png", f"s{i}", "male", "black") for i in range(3)]
    with pytest.raises(SchemaMismatch):
        load_manifest(write_csv(manifest_dir / "m.csv", HEADER[:4], rows))


def test_manifest_bad_path_reported(manifest_dir):
    rows = [("img0.png", "s0", "male", "white", 30), ("nope.png", "s1", "male", "white", 30), ("img2.png", "s2", "male", "white", 30)]
    m = load_manifest(write_csv(manifest_dir / "m.csv", HEADER, rows))
    assert len(m) == 2
    assert m.failures == [(3, "nope.png")]


def test_manifest_errors(tmp_path):
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "absent.csv")
    with pytest.raises(EmptyManifest):
        load_manifest(write_csv(tmp_path / "m.csv", HEADER, []))


def rec(sid, age, race="black", gender="male"):
    return ManifestRecord(f"{sid}_{age}.png", sid, gender, race, age)


def test_age_boundaries():
    records = [rec("a", 25), rec("b", 40, "white"), rec("c", 26), rec("d", 39, "white")]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyGroupWarning)
        g = partition_groups(records)
    assert records[0] in g[GroupKey("black")] and records[0] in g[GroupKey("black", "youth")]
    assert records[1] in g[GroupKey("white")] and records[1] in g[GroupKey("white", "senior")]
    assert records[2] in g[GroupKey("black", "middle")]
    assert records[3] in g[GroupKey("white", "middle")]


def test_female_excluded():
    records = [rec("a", 30), rec("b", 30, gender="female"), rec("c", 50)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyGroupWarning)
        g = partition_groups(records)
    assert all(records[1] not in members for members in g.values())
    assert len(g) == 8


def test_small_group_warns():
    with pytest.warns(EmptyGroupWarning):
        partition_groups([rec("a", 20), rec("b", 20)])


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 90), st.sampled_from(["black", "white", "other"]),
                          st.sampled_from(["male", "female"])), min_size=1, max_size=60))
def test_partition_is_disjoint_cover(rows):
    records = [ManifestRecord(f"{i}.png", f"s{s}", g, r, a) for i, (s, a, r, g) in enumerate(rows)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyGroupWarning)
        groups = partition_groups(records)
    for race in ("black", "white"):
        bands = [groups[GroupKey(race, b)] for b in ("youth", "middle", "senior")]
        assert sum(map(len, bands)) == len(groups[GroupKey(race)])
        ids = [id(r) for b in bands for r in b]
        assert len(ids) == len(set(ids))
        expected = [r for r in records if r.race == race and r.gender == "male"]
        assert groups[GroupKey(race)] == expected


def subjects(n, per=3):
    return [rec(f"s{i:03d}", 20 + k) for i in range(n) for k in range(per)]


def test_split_ten_subjects():
    group = subjects(10)
    tr, te = split_train_test(group, 0.9, seed=5)
    assert len({r.subject_id for r in tr}) == 9
    assert len({r.subject_id for r in te}) == 1
    assert (tr, te) == split_train_test(group, 0.9, seed=5)


def test_split_one_subject():
    with pytest.raises(TooFewSubjects):
        split_train_test(subjects(1), 0.9, seed=0)


@given(st.integers(0, 2**31 - 1))
def test_split_subject_disjoint(seed):
    tr, te = split_train_test(subjects(100, per=2), 0.9, seed=seed)
    train_ids = {r.subject_id for r in tr}
    test_ids = {r.subject_id for r in te}
    assert not any(s in test_ids for s in train_ids)
    assert len(train_ids) == 90 and len(tr) + len(te) == 200


def test_split_by_image_keeps_every_subject():
    tr, te = split_train_test(subjects(4, per=8), 0.75, seed=2, by="image")
    assert {r.subject_id for r in tr} == {r.subject_id for r in te}
    assert len(tr) == 24 and len(te) == 8


def test_pairs_balanced():
    pairs = sample_pairs(subjects(10, per=4), 100, 0.5, seed=0)
    assert sum(p.indicator == 0 for p in pairs) == 50
    assert sum(p.indicator == 1 for p in pairs) == 50


def test_pairs_infeasible():
    with pytest.raises(InfeasiblePositives):
        sample_pairs(subjects(5, per=1), 10, 0.5, seed=0)


def test_pairs_label_consistency_exhaustive():
    pairs = sample_pairs(subjects(20, per=5), 1000, 0.5, seed=11)
    assert sum(p.indicator == 0 for p in pairs) / len(pairs) == 0.5
    for p in pairs:
        assert (p.indicator == 0) == (p.a.subject_id == p.b.subject_id)
        if p.indicator == 0:
            assert p.a is not p.b
    assert [(p.a, p.b) for p in pairs] == [(p.a, p.b) for p in sample_pairs(subjects(20, per=5), 1000, 0.5, seed=11)]


def test_pair_sample_rejects_bad_label():
    with pytest.raises(ValueError):
        PairSample(rec("a", 20), rec("b", 20), 0)


def test_load_image_scaling(tmp_path):
    arr = np.zeros((128, 128), dtype=np.uint8)
    arr[5, 7] = 255
    img = load_image(write_png(tmp_path / "a.png", arr))
    assert img.pixels.shape == (128, 128)
    assert img.pixels.max() == 1.0 and img.pixels.min() == 0.0


def test_load_image_resize(tmp_path):
    img = load_image(write_png(tmp_path / "a.png", np.random.default_rng(0).integers(0, 256, (256, 256))))
    assert img.pixels.shape == (128, 128)


def test_load_image_matches_reference_resampler(tmp_path):
    src = np.random.default_rng(3).integers(0, 256, (120, 140)).astype(np.uint8)  # H=120, W=140
    img = load_image(write_png(tmp_path / "a.png", src))
    scale = 128 / 120
    nh, nw = 128, int(round(140 * scale))
    ref = bilinear_resize(src / 255.0, nh, nw)
    left = (nw - 128) // 2
    np.testing.assert_allclose(img.pixels, ref[:, left : left + 128], atol=1e-5)


def test_load_image_color_converted(tmp_path):
    rgb = np.zeros((128, 128, 3), dtype=np.uint8)
    rgb[..., 1] = 200
    Image.fromarray(rgb).save(tmp_path / "c.png")
    with pytest.warns(UserWarning):
        img = load_image(tmp_path / "c.png")
    np.testing.assert_allclose(img.pixels, round(200 * 0.587) / 255.0, atol=1 / 255)


def test_load_image_decode_error(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DecodeError):
        load_image(tmp_path / "bad.png")


@given(seed=st.integers(0, 2**32 - 1))
def test_ingestion_idempotent(seed, tmp_path_factory):
    d = tmp_path_factory.mktemp("idem")
    src = np.random.default_rng(seed).integers(0, 256, (128, 128)).astype(np.uint8)
    first = load_image(write_png(d / "a.png", src))
    save_image(first, d / "b.png")
    second = load_image(d / "b.png")
    assert first.pixels.tobytes() == second.pixels.tobytes()


def test_face_image_invariants():
    with pytest.raises(ShapeMismatch):
        FaceImage(np.zeros((64, 64)))
    with pytest.raises(ValueError):
        FaceImage(np.full((128, 128), 1.5))
    assert FaceImage(np.zeros((1, 128, 128))).shape == (1, 128, 128)
