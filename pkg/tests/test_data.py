import numpy as np
import pytest

from styletune.data import (
    ClassSpec,
    DomainSpec,
    default_class_specs,
    default_domain_specs,
    generate_dataset,
    load_dataset,
    make_base_to_novel_split,
    make_domain_split,
    random_crop,
    save_dataset,
)
from styletune.errors import ContractError, IntegrityError


def small_dataset(seed=0, per=6, n_domains=4, n_classes=8):
    return generate_dataset(
        default_domain_specs(n_domains), default_class_specs(n_classes), per, seed=seed
    )


def test_same_seed_byte_identical():
    a = small_dataset(seed=5)
    b = small_dataset(seed=5)
    np.testing.assert_array_equal(a.images, b.images)
    c = small_dataset(seed=6)
    assert not np.array_equal(a.images, c.images)


def test_class_counts_exact():
    ds = small_dataset(per=6)
    for dom in ds.domain_id_list:
        for cls in ds.class_id_list:
            assert len(ds.indices(domains=[dom], classes=[cls])) == 6


def test_channel_statistics_match_domain_targets():
    # empirical per-domain channel moments land within 10% of the spec targets
    ds = generate_dataset(default_domain_specs(2), default_class_specs(8), 70, seed=3)
    for dom in ds.domains:
        idx = ds.indices(domains=[dom.domain_id])
        assert len(idx) >= 500
        pix = ds.images[idx]
        for c in range(3):
            mean = pix[:, c].mean()
            std = pix[:, c].std()
            assert abs(mean - dom.color_mean[c]) <= 0.1 * max(1.0, abs(dom.color_mean[c]))
            assert abs(std - dom.color_std[c]) <= 0.1 * dom.color_std[c]


def test_degenerate_specs_rejected():
    with pytest.raises(ContractError):
        generate_dataset(default_domain_specs(1), default_class_specs(8), 4, seed=0)
    with pytest.raises(ContractError):
        generate_dataset(default_domain_specs(2), default_class_specs(3 + 1)[:3], 4, seed=0)
    with pytest.raises(ContractError):
        generate_dataset(default_domain_specs(2), default_class_specs(8), 0, seed=0)
    dup = [ClassSpec(0, "disk"), ClassSpec(1, "disk"), ClassSpec(2, "ring"), ClassSpec(3, "cross")]
    with pytest.raises(ContractError):
        generate_dataset(default_domain_specs(2), dup, 4, seed=0)


def test_domain_spec_validation():
    with pytest.raises(ContractError):
        DomainSpec(0, (0, 0, 0), (1, 0, 1), (1, 2), 0.1)
    with pytest.raises(ContractError):
        DomainSpec(0, (0, 0, 0), (1, 1, 1), (1, 2), 1.0)


def test_base_to_novel_split_bookkeeping():
    ds = small_dataset(per=20)
    split = make_base_to_novel_split(ds, fraction_base=0.5, shots=16, seed=1, source_domains=[0, 1])
    assert len(split.base_classes) == 4 and len(split.novel_classes) == 4
    assert not (set(split.base_classes) & set(split.novel_classes))
    assert len(split.train_idx) == 4 * 16
    train_classes = set(ds.class_ids[split.train_idx].tolist())
    assert train_classes == set(split.base_classes.tolist())
    assert set(ds.domain_ids[split.train_idx].tolist()) <= {0, 1}
    novel_in_train = set(ds.class_ids[split.train_idx]) & set(split.novel_classes.tolist())
    assert not novel_in_train
    # deterministic
    split2 = make_base_to_novel_split(ds, fraction_base=0.5, shots=16, seed=1, source_domains=[0, 1])
    np.testing.assert_array_equal(split.train_idx, split2.train_idx)
    np.testing.assert_array_equal(split.base_classes, split2.base_classes)


def test_base_to_novel_split_insufficient_shots():
    ds = small_dataset(per=4)
    with pytest.raises(ContractError):
        make_base_to_novel_split(ds, shots=16, seed=0)


def test_domain_split_bookkeeping():
    ds = small_dataset(per=20)
    split = make_domain_split(ds, [0, 1], [2, 3], shots=16, seed=2)
    assert set(ds.domain_ids[split.train_idx].tolist()) <= {0, 1}
    for t, idx in split.test_target_idx.items():
        assert set(ds.domain_ids[idx].tolist()) == {t}
    split2 = make_domain_split(ds, [0, 1], [2, 3], shots=16, seed=2)
    np.testing.assert_array_equal(split.train_idx, split2.train_idx)
    with pytest.raises(ContractError):
        make_domain_split(ds, [0, 1], [1, 2])


def test_save_load_round_trip(tmp_path):
    ds = small_dataset(per=2, n_domains=2, n_classes=4)
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.class_ids, ds.class_ids)
    np.testing.assert_array_equal(back.domain_ids, ds.domain_ids)
    assert back.seed == ds.seed
    # manifest seed supports re-generation
    regen = generate_dataset(back.domains, back.classes, back.samples_per_class_per_domain, back.seed)
    np.testing.assert_array_equal(regen.images, ds.images)


def test_corrupted_sample_named_in_error(tmp_path):
    ds = small_dataset(per=2, n_domains=2, n_classes=4)
    save_dataset(ds, tmp_path / "ds")
    victim = tmp_path / "ds" / "domain_0" / "class_1" / "sample_0.bin"
    victim.write_bytes(victim.read_bytes()[:-9])
    with pytest.raises(IntegrityError) as exc:
        load_dataset(tmp_path / "ds")
    assert "sample_0.bin" in str(exc.value)


def test_missing_file_named_in_error(tmp_path):
    ds = small_dataset(per=2, n_domains=2, n_classes=4)
    save_dataset(ds, tmp_path / "ds")
    victim = tmp_path / "ds" / "domain_1" / "class_2" / "sample_1.bin"
    victim.unlink()
    with pytest.raises(IntegrityError) as exc:
        load_dataset(tmp_path / "ds")
    assert "sample_1.bin" in str(exc.value)


def test_random_crop_shape_and_determinism():
    img = np.random.default_rng(0).normal(size=(3, 24, 24))
    a = random_crop(img, np.random.default_rng(1))
    b = random_crop(img, np.random.default_rng(1))
    assert a.shape == (3, 24, 24)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, img)
