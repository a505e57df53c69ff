import numpy as np
import pytest

from ephemyarn.bench import dataset, kernels, tasks
from ephemyarn.bench.dataset import teragen, teravalidate, sample_split_points, dataset_checksum
from ephemyarn.errors import DegeneratePartition, MalformedRecord, MissingInput, OutputExists

from refs import ref_checksum, ref_record


def concat(d):
    return b"".join(p.read_bytes() for p in dataset.data_files(d))


def make_records(keys):
    recs = np.zeros((len(keys), 100), dtype=np.uint8)
    for i, k in enumerate(keys):
        recs[i, :10] = np.frombuffer(k, dtype=np.uint8)
        recs[i, 10:] = i % 256
    return recs


@pytest.fixture(params=["numpy", "numba"])
def backend(request, monkeypatch):
    monkeypatch.setenv(kernels.KERNELS_ENV, request.param)
    return request.param


# -- kernels -----------------------------------------------------------------


def test_records_match_reference(backend):
    rows = [0, 1, 2, 99, 12345, 2**40 + 7]
    for seed in (0, 1, 2**63 + 5):
        for row in rows:
            assert kernels.generate_records(seed, row, 1).tobytes() == ref_record(seed, row)


def test_backends_agree():
    recs = kernels.generate_records(7, 1000, 5000, use="numpy")
    assert np.array_equal(recs, kernels.generate_records(7, 1000, 5000, use="numba"))
    keys = recs[:, :10]
    assert kernels.key_checksum(keys, use="numpy") == kernels.key_checksum(keys, use="numba")
    assert kernels.key_checksum(recs[:50]) == ref_checksum(recs[:50].tobytes()[i:i + 100] for i in range(0, 5000, 100))
    srt = kernels.sort_records(recs)
    splits = srt[[1000, 2500, 2500, 4000], :10]
    assert np.array_equal(kernels.partition_of(recs, splits, use="numpy"), kernels.partition_of(recs, splits, use="numba"))
    for use in ("numpy", "numba"):
        assert kernels.first_unsorted(srt, use=use) == -1
        bad = srt.copy()
        bad[[10, 11]] = bad[[11, 10]]
        assert kernels.first_unsorted(bad, use=use) == 11
        assert kernels.first_unsorted(srt[:1], use=use) == -1


def test_partition_is_first_split_greater(backend):
    splits = make_records([b"b" * 10, b"d" * 10, b"d" * 10])[:, :10]
    keys = make_records([b"a" * 10, b"b" * 10, b"c" * 10, b"d" * 10, b"z" * 10])
    assert kernels.partition_of(keys, splits).tolist() == [0, 1, 1, 3, 3]


def test_bad_backend_env(monkeypatch):
    monkeypatch.setenv(kernels.KERNELS_ENV, "fortran")
    with pytest.raises(ValueError):
        kernels.backend()


# -- teragen -----------------------------------------------------------------


def test_teragen_empty(tmp_path):
    assert teragen(0, 3, 0, tmp_path / "g") == [0, 0, 0]
    files = dataset.data_files(tmp_path / "g")
    assert [f.name for f in files] == ["part-m-00000", "part-m-00001", "part-m-00002"]
    assert all(f.stat().st_size == 0 for f in files)


def test_teragen_sizes(tmp_path):
    teragen(1000, 2, 0, tmp_path / "g")
    assert [f.stat().st_size for f in dataset.data_files(tmp_path / "g")] == [50_000, 50_000]
    teragen(10, 4, 0, tmp_path / "h")  # ceil(10/4) = 3 per shard
    assert [f.stat().st_size // 100 for f in dataset.data_files(tmp_path / "h")] == [3, 3, 3, 1]
    teragen(2, 4, 0, tmp_path / "i")
    assert [f.stat().st_size // 100 for f in dataset.data_files(tmp_path / "i")] == [1, 1, 0, 0]


def test_teragen_resharding(tmp_path, backend):
    one = tmp_path / "m1"
    teragen(10_000, 1, 3, one)
    ref = one.joinpath("part-m-00000").read_bytes()
    assert ref[:100] == ref_record(3, 0) and ref[-100:] == ref_record(3, 9999)
    for m in (2, 4, 8):
        teragen(10_000, m, 3, tmp_path / f"m{m}")
        assert concat(tmp_path / f"m{m}") == ref


def test_teragen_seed_matters(tmp_path):
    teragen(100, 1, 0, tmp_path / "a")
    teragen(100, 1, 1, tmp_path / "b")
    assert concat(tmp_path / "a") != concat(tmp_path / "b")


def test_teragen_errors(tmp_path):
    (tmp_path / "g").mkdir()
    with pytest.raises(OutputExists):
        teragen(10, 1, 0, tmp_path / "g")
    with pytest.raises(ValueError):
        teragen(10, 0, 0, tmp_path / "h")
    with pytest.raises(ValueError):
        teragen(-1, 1, 0, tmp_path / "h")


def test_teragen_task_matches_library(tmp_path):
    teragen(777, 3, 9, tmp_path / "lib")
    out = tmp_path / "task"
    out.mkdir()
    for i in range(3):
        tasks.main(["teragen", "--rows", "777", "--mappers", "3", "--seed", "9", "--index", str(i), "--out", str(out)])
    assert concat(out) == concat(tmp_path / "lib")


# -- sampling ----------------------------------------------------------------


def test_sample_single_reducer(tmp_path):
    teragen(100, 1, 0, tmp_path / "g")
    assert sample_split_points(tmp_path / "g", 1) == []


def test_sample_uniform_balance(tmp_path):
    n = 100_000
    teragen(n, 4, 5, tmp_path / "g")
    splits = sample_split_points(tmp_path / "g", 4, sample_size=10_000)
    assert len(splits) == 3 and splits == sorted(splits)
    keys = np.concatenate([dataset.read_records(f)[:, :10] for f in dataset.data_files(tmp_path / "g")])
    counts = np.bincount(kernels.partition_of(keys, np.frombuffer(b"".join(splits), np.uint8).reshape(-1, 10)), minlength=4)
    assert counts.sum() == n
    assert np.all(np.abs(counts - n / 4) <= 0.2 * n / 4), counts
    # oracle: exact quantiles from the full sort are within a small rank distance of the sampled splits
    full = sorted(bytes(k) for k in keys)
    for k, s in enumerate(splits, 1):
        rank = np.searchsorted(np.array(full, dtype="S10"), np.bytes_(s))
        assert abs(rank - k * n // 4) < 0.05 * n


def test_sample_deterministic(tmp_path):
    teragen(5000, 3, 1, tmp_path / "g")
    assert sample_split_points(tmp_path / "g", 5, 700) == sample_split_points(tmp_path / "g", 5, 700)


def test_sample_identical_keys(tmp_path):
    d = tmp_path / "same"
    d.mkdir()
    make_records([b"k" * 10] * 1000).tofile(d / "part-m-00000")
    with pytest.warns(DegeneratePartition):
        splits = sample_split_points(d, 4)
    assert splits == [b"k" * 10] * 3
    pid = kernels.partition_of(dataset.read_records(d / "part-m-00000"), np.frombuffer(b"".join(splits), np.uint8))
    assert set(pid.tolist()) == {3}


def test_sample_errors(tmp_path):
    with pytest.raises(MissingInput):
        sample_split_points(tmp_path / "none", 2)
    teragen(0, 2, 0, tmp_path / "empty")
    with pytest.raises(MissingInput):
        sample_split_points(tmp_path / "empty", 2)
    with pytest.raises(ValueError):
        sample_split_points(tmp_path / "empty", 0)


# -- sort tasks and teravalidate ---------------------------------------------


def local_sort(input_dir, out_dir, reducers, budget_mb=256, scratch=None):
    """Run the map and reduce task programs in-process, mapper per input file."""
    files = dataset.data_files(input_dir)
    splits_file = out_dir.parent / "splits"
    dataset.write_splits(splits_file, sample_split_points(input_dir, reducers) if files else [])
    map_dirs = []
    for i, f in enumerate(files):
        d = out_dir.parent / f"map_{i}"
        d.mkdir()
        tasks.sort_map_task([f], splits_file, reducers, d)
        map_dirs.append(d)
    out_dir.mkdir()
    for r in range(reducers):
        tasks.sort_reduce_task([d / f"part_{r}" for d in map_dirs], r, out_dir, budget_mb, scratch)


def test_sort_matches_full_sort_oracle(tmp_path):
    teragen(20_000, 4, 11, tmp_path / "g")
    local_sort(tmp_path / "g", tmp_path / "s", 3)
    raw = concat(tmp_path / "g")
    oracle = b"".join(sorted(raw[i:i + 100] for i in range(0, len(raw), 100)))
    assert b"".join(p.read_bytes() for p in dataset.data_files(tmp_path / "s", "part-r-")) == oracle
    rep = teravalidate(tmp_path / "s")
    assert rep.sorted and rep.rows == 20_000 and rep.partitions == 3
    assert rep.key_checksum == dataset_checksum(tmp_path / "g")[1]


def test_sorted_input_single_reducer_identity(tmp_path):
    teragen(3000, 1, 2, tmp_path / "raw")
    d = tmp_path / "sorted_in"
    d.mkdir()
    kernels.sort_records(dataset.read_records(tmp_path / "raw" / "part-m-00000")).tofile(d / "part-m-00000")
    local_sort(d, tmp_path / "s", 1)
    assert (tmp_path / "s" / "part-r-00000").read_bytes() == (d / "part-m-00000").read_bytes()


def test_sort_empty(tmp_path):
    teragen(0, 2, 0, tmp_path / "g")
    local_sort(tmp_path / "g", tmp_path / "s", 1)
    rep = teravalidate(tmp_path / "s")
    assert rep.sorted and rep.rows == 0 and rep.key_checksum == 0


def test_external_sort_path(tmp_path):
    teragen(30_000, 2, 4, tmp_path / "g")
    tasks._external_sort(dataset.data_files(tmp_path / "g"), tmp_path / "ext", 100 * 7000, tmp_path)
    raw = concat(tmp_path / "g")
    assert (tmp_path / "ext").read_bytes() == b"".join(sorted(raw[i:i + 100] for i in range(0, len(raw), 100)))
    assert not list(tmp_path.glob("sortruns-*"))


def test_reduce_budget_switch(tmp_path, monkeypatch):
    teragen(20_000, 2, 4, tmp_path / "g")
    called = []
    real = tasks._external_sort
    monkeypatch.setattr(tasks, "_external_sort", lambda *a: called.append(1) or real(*a))
    (tmp_path / "o").mkdir()
    # 2 MB of input against a 1 MB budget spills to sorted runs
    tasks.sort_reduce_task(dataset.data_files(tmp_path / "g"), 0, tmp_path / "o", budget_mb=1, scratch=tmp_path)
    assert called and teravalidate(tmp_path / "o").sorted


def test_teravalidate_faults(tmp_path):
    teragen(2000, 2, 0, tmp_path / "g")
    local_sort(tmp_path / "g", tmp_path / "s", 2)
    good = teravalidate(tmp_path / "s")
    part = tmp_path / "s" / "part-r-00000"
    data = bytearray(part.read_bytes())
    # swap records 5 and 6
    data[500:600], data[600:700] = data[600:700], data[500:600]
    part.write_bytes(bytes(data))
    swapped = teravalidate(tmp_path / "s")
    assert not swapped.sorted and "record 6" in swapped.problem
    assert swapped.key_checksum == good.key_checksum
    data[500:600], data[600:700] = data[600:700], data[500:600]
    part.write_bytes(bytes(data[:-100]))
    deleted = teravalidate(tmp_path / "s")
    assert deleted.sorted and deleted.rows == good.rows - 1 and deleted.key_checksum != good.key_checksum


def test_teravalidate_boundary_order(tmp_path):
    d = tmp_path / "s"
    d.mkdir()
    make_records([b"m" * 10, b"n" * 10]).tofile(d / "part-r-00000")
    (d / "part-r-00001").touch()  # empty partitions are skipped
    make_records([b"a" * 10]).tofile(d / "part-r-00002")
    rep = teravalidate(d)
    assert not rep.sorted and "part-r-00002" in rep.problem


def test_malformed_record(tmp_path):
    d = tmp_path / "s"
    d.mkdir()
    (d / "part-r-00000").write_bytes(b"x" * 250)
    with pytest.raises(MalformedRecord) as ei:
        teravalidate(d)
    assert ei.value.offset == 200 and ei.value.path.endswith("part-r-00000")


def test_split_file_roundtrip(tmp_path):
    dataset.write_splits(tmp_path / "f", [b"a" * 10, b"b" * 10])
    assert dataset.read_splits(tmp_path / "f").shape == (2, 10)
    (tmp_path / "g").write_bytes(b"abc")
    with pytest.raises(MalformedRecord):
        dataset.read_splits(tmp_path / "g")
