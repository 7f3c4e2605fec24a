import numpy as np
import pytest

from momix.errors import (
    BadValue,
    EmptyRegion,
    LengthMismatch,
    MissingBackground,
    NoValidPairs,
    UnknownSubject,
)
from momix.features import (
    Directive,
    EditPlan,
    FeatureMap,
    extract_descriptors,
    load_descriptor,
    load_plan,
    lsmm,
    motion_delta,
    plan_from_json,
    plan_to_json,
    recompose,
    save_descriptor,
    save_plan,
    soft_blend,
)
from momix.masks import MaskEdit
from momix.synth import BlobSpec, SceneSpec, render_scene
from momix.tensors import MaskTrack


def test_lsmm_constant():
    frame = np.full((3, 4, 4), 2.0)
    region = np.zeros((4, 4), dtype=bool)
    region[1, 1] = region[2, 3] = True
    assert np.allclose(lsmm(frame, region), [2.0, 2.0, 2.0])


def test_lsmm_direct_oracle():
    frame = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    region = np.array([[True, True], [False, False]])
    got = lsmm(frame, region)
    # direct per-pixel oracle
    want = (1.0 + 2.0) / 2
    assert got.shape == (1,)
    assert got[0] == want


def test_lsmm_empty_region():
    with pytest.raises(EmptyRegion):
        lsmm(np.zeros((1, 2, 2)), np.zeros((2, 2), dtype=bool))


def _moving_blob_case():
    """1-channel 16x16, blob value 1.0 on zero texture, moves 2 px right."""
    n = 2
    spec = SceneSpec(
        n_frames=n, n_channels=1, height=16, width=16,
        blobs=(BlobSpec("A", ((8.0, 6.0), (8.0, 8.0)), 2.5, (1.0,)),),
        texture_amplitude=0.0,
    )
    return render_scene(spec)


def test_motion_delta_trivia():
    lat, tracks, _ = _moving_blob_case()
    z = lat.data
    assert np.allclose(motion_delta(z[0], z[0], tracks[0], [], 0, 0), 0.0)
    assert np.allclose(motion_delta(z[0], z[0], tracks[0], [], 0, 1), 0.0)


def test_motion_delta_brute_force_oracle():
    lat, tracks, _ = _moving_blob_case()
    z = lat.data
    got = motion_delta(z[0], z[1], tracks[0], [], 0, 1)
    # brute-force pixel enumeration over the union region
    region = tracks[0].frame(0) | tracks[0].frame(1)
    s0 = s1 = 0.0
    count = 0
    for r in range(16):
        for c in range(16):
            if region[r, c]:
                s0 += z[0, 0, r, c]
                s1 += z[1, 0, r, c]
                count += 1
    assert count > 0
    assert got.shape == (1,)
    assert abs(got[0] - (s0 / count - s1 / count)) < 1e-12


def test_motion_delta_uses_shared_region():
    lat, tracks, _ = _moving_blob_case()
    z = lat.data
    d_ij = motion_delta(z[0], z[1], tracks[0], [], 0, 1)
    d_ji = motion_delta(z[1], z[0], tracks[0], [], 1, 0)
    assert np.array_equal(d_ij, -d_ji)


def _scene(n=5, seed=3):
    return SceneSpec(
        n_frames=n, n_channels=3, height=32, width=32,
        blobs=(
            BlobSpec("A", tuple((10.0, 6.0 + 3.0 * f) for f in range(n)), 3.0, (0, 2.5, 0)),
            BlobSpec("B", tuple((6.0 + 3.0 * f, 16.0) for f in range(n)), 3.0, (0, 0, 2.5)),
        ),
        texture_seed=seed, texture_amplitude=0.6,
    )


def test_extract_descriptor_invariants():
    lat, tracks, _ = render_scene(_scene())
    descs = extract_descriptors(lat, tracks, timestep=2)
    assert sorted(d.source_id for d in descs) == ["A", "B", "background"]
    for d in descs:
        assert d.timestep == 2
        for i, j in d.valid_pairs:
            assert np.array_equal(d.delta(i, j), -d.delta(j, i))
        for i in range(d.n_frames):
            assert not d.has_pair(i, i)
            assert np.all(d.delta(i, i) == 0.0)


def test_extract_subject_absent_everywhere():
    lat, tracks, _ = render_scene(_scene())
    empty = MaskTrack(np.zeros((5, 32, 32), dtype=bool), subject_id="ghost")
    with pytest.raises(NoValidPairs):
        extract_descriptors(lat, list(tracks) + [empty], timestep=0)
    descs = extract_descriptors(lat, list(tracks) + [empty], timestep=0, strict=False)
    assert sorted(d.source_id for d in descs) == ["A", "B", "background"]


def test_global_mean_degeneracy():
    # an all-true mask makes the delta equal the global spatial mean difference
    rng = np.random.default_rng(0)
    z = rng.standard_normal((3, 2, 8, 8))
    full = MaskTrack(np.ones((3, 8, 8), dtype=bool), subject_id="all")
    got = motion_delta(z[0], z[2], full, [], 0, 2)
    want = z[0].mean(axis=(1, 2)) - z[2].mean(axis=(1, 2))  # independent oracle
    assert np.max(np.abs(got - want)) <= 1e-6


def test_disentangled_matches_isolated():
    # descriptors for one blob in a two-blob scene with disjoint trajectories
    # match the same blob rendered alone
    n = 5
    spec = SceneSpec(
        n_frames=n, n_channels=3, height=32, width=32,
        blobs=(
            BlobSpec("A", tuple((8.0, 6.0 + 3.0 * f) for f in range(n)), 3.0, (0, 2.5, 0)),
            BlobSpec("B", tuple((24.0, 22.0 - 3.0 * f) for f in range(n)), 3.0, (0, 0, 2.5)),
        ),
        texture_seed=3, texture_amplitude=0.6,
    )
    lat, tracks, _ = render_scene(spec)
    iso_spec = SceneSpec(
        n_frames=spec.n_frames, n_channels=3, height=32, width=32,
        blobs=(spec.blobs[0],), texture_seed=spec.texture_seed,
        texture_amplitude=spec.texture_amplitude,
    )
    iso_lat, iso_tracks, _ = render_scene(iso_spec)
    multi = {d.source_id: d for d in extract_descriptors(lat, tracks, timestep=0)}
    iso = extract_descriptors(iso_lat, iso_tracks, timestep=0)[0]
    # trajectories here are disjoint, so exclusion recovers the isolated values
    for i, j in iso.forward_pairs():
        if multi["A"].has_pair(i, j):
            assert np.max(np.abs(multi["A"].delta(i, j) - iso.delta(i, j))) <= 1e-6


def test_feature_map_affine():
    lat, tracks, _ = render_scene(_scene(n=3))
    fm = FeatureMap(scale=(2.0, 0.5, 1.0), offset=(1.0, -1.0, 0.0))
    plain = extract_descriptors(lat, tracks, timestep=0)
    mapped = extract_descriptors(lat, tracks, timestep=0, feature_map=fm)
    for p, m in zip(plain, mapped):
        for i, j in p.forward_pairs():
            # offsets cancel in deltas; scales pass through
            assert np.allclose(m.delta(i, j), p.delta(i, j) * np.array([2.0, 0.5, 1.0]))


def test_soft_blend_endpoints_and_oracle():
    s = np.array([2.0, 0.0])
    c = np.array([0.0, 2.0])
    out0 = soft_blend(s, c, 0.0)
    assert out0.tobytes() == s.tobytes()  # bit-exact at w_c = 0
    assert np.allclose(soft_blend(s, c, 1.0), [1.0, 1.0])
    assert np.allclose(soft_blend(s, s, 7.3), s)
    with pytest.raises(LengthMismatch):
        soft_blend(s, np.zeros(3), 1.0)
    with pytest.raises(BadValue):
        soft_blend(s, c, -0.1)


def test_soft_blend_monotone_approach():
    rng = np.random.default_rng(1)
    s, c = rng.standard_normal(4), rng.standard_normal(4)
    dists = [np.linalg.norm(soft_blend(s, c, w) - c) for w in (0, 0.5, 1, 2, 4, 8, 1e6)]
    assert all(a >= b - 1e-12 for a, b in zip(dists, dists[1:]))


def _descriptors():
    lat, tracks, _ = render_scene(_scene())
    return extract_descriptors(lat, tracks, timestep=0)


def test_recompose_keep_identity():
    descs = _descriptors()
    out = recompose(descs, EditPlan())
    assert [d.source_id for d in out] == [d.source_id for d in descs]
    for a, b in zip(out, descs):
        for i, j in b.forward_pairs():
            assert np.array_equal(a.delta(i, j), b.delta(i, j))


def test_recompose_remove_copies_background():
    descs = _descriptors()
    bg = next(d for d in descs if d.source_id == "background")
    out = recompose(descs, EditPlan(directives={"A": Directive("remove")}))
    a = next(d for d in out if d.source_id == "A")
    assert a.valid_pairs == bg.valid_pairs
    for i, j in bg.forward_pairs():
        assert np.array_equal(a.delta(i, j), bg.delta(i, j))


def test_recompose_soften_oracle():
    descs = _descriptors()
    bg = next(d for d in descs if d.source_id == "background")
    sub = next(d for d in descs if d.source_id == "A")
    out = recompose(descs, EditPlan(directives={"A": Directive("soften", w_c=3.0)}))
    a = next(d for d in out if d.source_id == "A")
    for i, j in a.forward_pairs():
        want = (sub.delta(i, j) + 3.0 * bg.delta(i, j)) / 4.0
        assert np.allclose(a.delta(i, j), want)


def test_recompose_camera_only_and_errors():
    descs = _descriptors()
    out = recompose(descs, EditPlan(camera_only=True))
    assert [d.source_id for d in out] == ["background"]
    with pytest.raises(UnknownSubject):
        recompose(descs, EditPlan(directives={"C": Directive("keep")}))
    no_bg = [d for d in descs if d.source_id != "background"]
    with pytest.raises(MissingBackground):
        recompose(no_bg, EditPlan(directives={"A": Directive("remove")}))


def test_recompose_mask_edit_passthrough():
    descs = _descriptors()
    edit = MaskEdit("shift", dx=3, dy=0)
    out = recompose(descs, EditPlan(directives={"A": Directive("mask_edit", edit=edit)}))
    a_in = next(d for d in descs if d.source_id == "A")
    a_out = next(d for d in out if d.source_id == "A")
    for i, j in a_in.forward_pairs():
        assert np.array_equal(a_out.delta(i, j), a_in.delta(i, j))


def test_plan_json_round_trip(tmp_path):
    plan = EditPlan(
        directives={
            "A": Directive("soften", w_c=2.0),
            "B": Directive("mask_edit", edit=MaskEdit("scale", factor=2.0, anchor=(7.5, 7.5))),
        },
        w_c=1.0,
    )
    back = plan_from_json(plan_to_json(plan))
    assert back == plan
    save_plan(plan, tmp_path / "plan.json")
    assert load_plan(tmp_path / "plan.json") == plan


def test_descriptor_archive_round_trip(tmp_path):
    descs = _descriptors()
    for d in descs:
        save_descriptor(d, tmp_path / f"{d.source_id}.json")
        back = load_descriptor(tmp_path / f"{d.source_id}.json")
        assert back.source_id == d.source_id
        assert back.valid_pairs == d.valid_pairs
        for i, j in d.forward_pairs():
            # archive stores float32; loader must reproduce those bits
            assert np.array_equal(
                back.delta(i, j), d.delta(i, j).astype(np.float32).astype(np.float64)
            )


def test_worker_count_env(monkeypatch):
    from momix.features import worker_count

    monkeypatch.setenv("CONMO_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("CONMO_THREADS", "0")
    assert worker_count() >= 1
    monkeypatch.delenv("CONMO_THREADS")
    assert worker_count() >= 1
    monkeypatch.setenv("CONMO_THREADS", "lots")
    with pytest.raises(BadValue):
        worker_count()


def test_parallel_extraction_matches_serial(monkeypatch):
    lat, tracks, _ = render_scene(_scene())
    monkeypatch.setenv("CONMO_THREADS", "1")
    serial = extract_descriptors(lat, tracks, timestep=0)
    monkeypatch.setenv("CONMO_THREADS", "4")
    parallel = extract_descriptors(lat, tracks, timestep=0)
    assert [d.source_id for d in serial] == [d.source_id for d in parallel]
    for a, b in zip(serial, parallel):
        assert a.valid_pairs == b.valid_pairs
        for i, j in a.forward_pairs():
            assert np.array_equal(a.delta(i, j), b.delta(i, j))
