import numpy as np
import pytest

from placerec.descriptor import CubeVectorSet
from placerec.filtering import (
    CUBES_PER_IMAGE,
    CandidateList,
    ImageFilterDb,
    build_image_filter_db,
    filter_stage,
    load_image_filter_db,
    nearest_records,
    save_image_filter_db,
    vote_histogram,
)
from placerec.tensor_io import BadMagicError, PayloadSizeError, TruncatedPayloadError


def cube_set(vectors):
    vectors = np.asarray(vectors)
    positions = np.zeros((vectors.shape[0], 2), dtype=np.int64)
    return CubeVectorSet(positions, vectors)


def random_db(rng, images, dim):
    reference = [
        (frame, cube_set(rng.standard_normal((CUBES_PER_IMAGE, dim)).astype(np.float32)))
        for frame in range(images)
    ]
    return build_image_filter_db(reference), reference


def naive_nearest(db, query_vector, count):
    """Full-sort scan: ties by lower record index, same arithmetic as the
    implementation must use."""
    vectors = db.vectors.astype(np.float64)
    q = np.asarray(query_vector, dtype=np.float64)
    distances = np.sqrt(((vectors - q) ** 2).sum(axis=1))
    order = sorted(range(len(distances)), key=lambda i: (distances[i], i))
    return [(int(db.owners[i]), float(distances[i])) for i in order[:count]]


def naive_filter(db, query, count):
    """Histogram voting exactly as specified, built on the naive scan."""
    votes: dict[int, float] = {}
    dist_sum: dict[int, float] = {}
    for vector in query.vectors:
        for owner, distance in naive_nearest(db, vector, count):
            votes[owner] = votes.get(owner, 0.0) + 1.0
            dist_sum[owner] = dist_sum.get(owner, 0.0) + distance
    ranked = sorted(votes, key=lambda f: (-votes[f], dist_sum[f], f))
    return [(f, votes[f]) for f in ranked[:count]]


class TestBuild:
    def test_record_layout(self, rng):
        db, reference = random_db(rng, 3, 8)
        assert db.image_count == 3
        assert db.record_count == 48
        assert db.dim == 8
        # records preserve input order, 16 consecutive rows per image
        for frame, cubes in reference:
            block = slice(frame * 16, frame * 16 + 16)
            assert np.all(db.owners[block] == frame)
            assert np.array_equal(db.vectors[block], cubes.vectors.astype(np.float32))

    def test_single_image(self, rng):
        db, _ = random_db(rng, 1, 4)
        assert db.record_count == 16
        assert set(db.owners.tolist()) == {0}

    def test_empty_reference(self):
        with pytest.raises(ValueError, match="empty"):
            build_image_filter_db([])

    def test_wrong_cube_count(self, rng):
        bad = cube_set(rng.standard_normal((15, 4)))
        with pytest.raises(ValueError, match="expected 16"):
            build_image_filter_db([(0, bad)])

    def test_dimension_mismatch(self, rng):
        a = cube_set(rng.standard_normal((16, 4)))
        b = cube_set(rng.standard_normal((16, 5)))
        with pytest.raises(ValueError, match="dim"):
            build_image_filter_db([(0, a), (1, b)])

    def test_duplicate_frame(self, rng):
        a = cube_set(rng.standard_normal((16, 4)))
        b = cube_set(rng.standard_normal((16, 4)))
        with pytest.raises(ValueError, match="duplicate"):
            build_image_filter_db([(7, a), (7, b)])


class TestNearestRecords:
    def test_stored_record_is_its_own_nearest(self, rng):
        db, reference = random_db(rng, 4, 8)
        probe = reference[2][1].vectors[5]
        owner, distance = nearest_records(db, probe, 1)[0]
        assert owner == 2
        assert distance == 0.0

    def test_full_count_is_permutation(self, rng):
        db, _ = random_db(rng, 3, 8)
        result = nearest_records(db, rng.standard_normal(8), db.record_count)
        assert len(result) == db.record_count
        distances = [d for _, d in result]
        assert distances == sorted(distances)

    def test_matches_naive_oracle(self, rng):
        for _ in range(20):
            images = int(rng.integers(1, 40))
            db, _ = random_db(rng, images, 16)
            count = int(rng.integers(1, db.record_count + 1))
            q = rng.standard_normal(16)
            assert nearest_records(db, q, count) == naive_nearest(db, q, count)

    def test_matches_oracle_with_duplicate_records(self, rng):
        base = rng.standard_normal((16, 6)).astype(np.float32)
        duplicated = [(f, cube_set(base)) for f in range(5)]  # every frame identical
        db = build_image_filter_db(duplicated)
        q = rng.standard_normal(6)
        for count in (1, 7, 16, 80):
            assert nearest_records(db, q, count) == naive_nearest(db, q, count)

    def test_distance_ties_break_by_record_index(self, rng):
        vec = rng.standard_normal(4).astype(np.float32)
        db = build_image_filter_db(
            [(f, cube_set(np.tile(vec, (16, 1)))) for f in (3, 1, 2)]
        )
        result = nearest_records(db, np.zeros(4), 20)
        # build order was frames 3, 1, 2; equal distances keep record order
        assert [owner for owner, _ in result] == [3] * 16 + [1] * 4

    def test_dimension_mismatch(self, rng):
        db, _ = random_db(rng, 2, 8)
        with pytest.raises(ValueError, match="dim"):
            nearest_records(db, np.zeros(9), 1)

    def test_count_bounds(self, rng):
        db, _ = random_db(rng, 2, 8)
        with pytest.raises(ValueError):
            nearest_records(db, np.zeros(8), 0)
        with pytest.raises(ValueError):
            nearest_records(db, np.zeros(8), db.record_count + 1)


class TestFilterStage:
    def test_planted_frame_dominates(self, rng):
        dim = 32
        target = rng.standard_normal((16, dim)).astype(np.float32)
        reference = [(4, cube_set(target))]
        for frame in range(5, 12):
            far = rng.standard_normal((16, dim)).astype(np.float32) + 100.0
            reference.append((frame, cube_set(far)))
        db = build_image_filter_db(reference)
        # sanity: the decoys really are farther than any in-target distance
        intra = max(
            float(np.linalg.norm(a.astype(np.float64) - b.astype(np.float64)))
            for a in target
            for b in target
        )
        nearest_far = min(
            float(np.linalg.norm(target[0].astype(np.float64) - v.astype(np.float64)))
            for _, cubes in reference[1:]
            for v in cubes.vectors
        )
        assert intra < nearest_far
        result = filter_stage(db, cube_set(target), 20)
        assert result.entries[0][0] == 4
        # N >= 16 and all decoys farther: each query vector votes for every
        # target record, so the winning bin holds exactly 16 * 16 votes.
        assert result.entries[0][1] == 256.0
        assert result.entries == naive_filter(db, cube_set(target), 20)

    def test_matches_naive_oracle(self, rng):
        for _ in range(10):
            images = int(rng.integers(2, 25))
            db, _ = random_db(rng, images, 12)
            count = int(rng.integers(1, db.record_count + 1))
            query = cube_set(rng.standard_normal((16, 12)).astype(np.float32))
            assert filter_stage(db, query, count).entries == naive_filter(db, query, count)

    def test_identical_frames_tie_to_lower_id(self, rng):
        vectors = rng.standard_normal((16, 8)).astype(np.float32)
        db = build_image_filter_db([(9, cube_set(vectors)), (2, cube_set(vectors))])
        result = filter_stage(db, cube_set(vectors), 32)
        assert [f for f, _ in result.entries] == [2, 9]
        assert result.entries[0][1] == result.entries[1][1]

    def test_single_candidate(self, rng):
        db, _ = random_db(rng, 6, 8)
        result = filter_stage(db, cube_set(rng.standard_normal((16, 8))), 1)
        assert len(result) == 1

    def test_vote_conservation(self, rng):
        db, _ = random_db(rng, 10, 8)
        query = cube_set(rng.standard_normal((16, 8)))
        for count in (1, 5, 40):
            bins = vote_histogram(db, query, count)
            total = sum(votes for votes, _ in bins.values())
            assert total == 16 * count

    def test_rank_weighted_votes(self, rng):
        db, _ = random_db(rng, 10, 8)
        query = cube_set(rng.standard_normal((16, 8)))
        count = 7
        bins = vote_histogram(db, query, count, rank_weighted=True)
        total = sum(votes for votes, _ in bins.values())
        harmonic = sum(1.0 / (r + 1) for r in range(count))
        assert abs(total - 16 * harmonic) < 1e-9

    def test_wrong_query_size(self, rng):
        db, _ = random_db(rng, 3, 8)
        with pytest.raises(ValueError, match="16"):
            filter_stage(db, cube_set(rng.standard_normal((10, 8))), 2)

    def test_deterministic(self, rng):
        db, _ = random_db(rng, 8, 8)
        query = cube_set(rng.standard_normal((16, 8)))
        assert filter_stage(db, query, 12).entries == filter_stage(db, query, 12).entries


class TestDbFile:
    def test_round_trip_preserves_scores(self, tmp_path, rng):
        db, _ = random_db(rng, 5, 8)
        path = tmp_path / "db.ifd"
        save_image_filter_db(db, path)
        loaded = load_image_filter_db(path)
        assert loaded.image_count == db.image_count
        assert np.array_equal(loaded.owners, db.owners)
        assert np.array_equal(loaded.vectors, db.vectors)
        q = rng.standard_normal(8)
        assert nearest_records(loaded, q, 10) == nearest_records(db, q, 10)

    def test_frozen_header(self, tmp_path, rng):
        db, _ = random_db(rng, 2, 3)
        path = tmp_path / "db.ifd"
        save_image_filter_db(db, path)
        raw = path.read_bytes()
        assert raw[:4] == b"IFD1"
        assert np.frombuffer(raw[4:12], dtype="<u4").tolist() == [2, 3]
        assert len(raw) == 12 + 32 * (4 + 12)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "db.ifd"
        path.write_bytes(b"JUNKxxxxxxxx")
        with pytest.raises(BadMagicError):
            load_image_filter_db(path)

    def test_truncated(self, tmp_path, rng):
        db, _ = random_db(rng, 2, 3)
        path = tmp_path / "db.ifd"
        save_image_filter_db(db, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedPayloadError):
            load_image_filter_db(path)

    def test_trailing_bytes(self, tmp_path, rng):
        db, _ = random_db(rng, 2, 3)
        path = tmp_path / "db.ifd"
        save_image_filter_db(db, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(PayloadSizeError):
            load_image_filter_db(path)


class TestCandidateList:
    def test_frame_ids_accessor(self):
        candidates = CandidateList([(5, 12.0), (2, 3.0)])
        assert candidates.frame_ids == [5, 2]
        assert len(candidates) == 2
