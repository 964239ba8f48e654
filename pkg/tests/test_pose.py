import json
import os
import subprocess
import sys

import numpy as np
import pytest

from charanim import kernels
from charanim.pose import (ANCHOR_JOINTS, COLORS, LIMBS, NUM_JOINTS, AlignmentError, OutOfCanvasWarning,
                           Pose, PoseFileError, SimilarityTransform, apply_alignment, build_target_sequence,
                           estimate_alignment, interpolate_transition, parse_pose_file, rasterize_pose,
                           write_pose_file)

from conftest import STANDING, make_pose, walking_clip


def _write(tmp_path, doc):
    p = tmp_path / "p.json"
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return p


# --- parsing ----------------------------------------------------------------

def test_single_frame_file(tmp_path):
    frame = [float(v) for xy in STANDING for v in (*xy, 1.0)]
    seq = parse_pose_file(_write(tmp_path, {"canvas_width": 512, "canvas_height": 512, "frames": [frame]}))
    assert len(seq) == 1
    assert seq[0].keypoint(1) == (256.0, 140.0, 1.0)
    assert seq.source is None


def test_short_frame_is_a_schema_error_at_frame_zero(tmp_path):
    doc = {"canvas_width": 512, "canvas_height": 512, "frames": [[1.0, 1.0, 1.0] * 17]}
    with pytest.raises(PoseFileError, match="frame 0 has 51 numbers"):
        parse_pose_file(_write(tmp_path, doc))


def test_schema_error_names_the_offending_frame(tmp_path):
    good = [1.0, 1.0, 1.0] * 18
    doc = {"canvas_width": 512, "canvas_height": 512, "frames": [good, good, good[:-3]]}
    with pytest.raises(PoseFileError, match="frame 2"):
        parse_pose_file(_write(tmp_path, doc))


def test_malformed_json_reports_byte_offset(tmp_path):
    # the multi-byte character puts the byte offset ahead of the character offset
    text = '{"note": "café", "frames": [1, 2,, 3]}'
    bad = text.index(",,") + 1
    with pytest.raises(PoseFileError) as info:
        parse_pose_file(_write(tmp_path, text))
    assert f"byte offset {len(text[:bad].encode())}" in str(info.value)
    assert len(text[:bad].encode()) == bad + 1


def test_ten_frames_with_missing_joints_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    frames, expected = [], []
    for i in range(10):
        missing = set(rng.choice(NUM_JOINTS, size=i % 4, replace=False).tolist())
        row, exp = [], []
        for j in range(NUM_JOINTS):
            x, y = float(10 * i + j), float(20 + j * 3)
            if j in missing:
                row += [123.0, 456.0, 0.0]  # coordinates of missing joints carry no meaning
                exp.append((0.0, 0.0, 0.0))
            else:
                row += [x, y, 0.5]
                exp.append((x, y, 0.5))
        frames.append(row)
        expected.append(exp)
    seq = parse_pose_file(_write(tmp_path, {"canvas_width": 300, "canvas_height": 200, "frames": frames}))
    assert len(seq) == 10
    for pose, exp in zip(seq, expected):
        assert [tuple(pose.keypoint(j)) for j in range(NUM_JOINTS)] == exp
    out = tmp_path / "again.json"
    write_pose_file(out, seq.poses)
    assert [p for p in parse_pose_file(out)] == list(seq)


def test_source_key_is_read(tmp_path):
    p = tmp_path / "s.json"
    src = make_pose(STANDING + 5)
    write_pose_file(p, walking_clip(3), source=src)
    seq = parse_pose_file(p)
    assert seq.source == src and len(seq) == 3


# --- alignment ----------------------------------------------------------------

def test_translation_is_recovered(source_pose):
    target = make_pose(STANDING + [50, 0])
    tf = estimate_alignment(source_pose, target)
    assert tf.scale == pytest.approx(1.0, abs=1e-12)
    assert tf.translation == pytest.approx((-50.0, 0.0), abs=1e-9)


def test_doubling_about_origin_gives_half_scale():
    source = make_pose(STANDING * 0.5)
    target = make_pose(STANDING)
    assert estimate_alignment(source, target).scale == pytest.approx(0.5, abs=1e-12)


def test_scale_about_neck_then_shift_is_recovered(source_pose):
    neck = STANDING[1]
    gen = SimilarityTransform(1.3, 0.0, tuple(neck - 1.3 * neck + [20, -10]))
    target = make_pose(gen.apply(STANDING), canvas=1024)
    est = estimate_alignment(make_pose(canvas=1024), target)
    both = est.compose(gen)
    assert both.scale == pytest.approx(1.0, abs=1e-6)
    assert both.rotation == 0.0
    assert np.allclose(both.translation, 0.0, atol=1e-6)


def test_too_few_anchors():
    conf = np.ones(NUM_JOINTS)
    conf[list(ANCHOR_JOINTS[1:])] = 0.0
    with pytest.raises(AlignmentError):
        estimate_alignment(make_pose(), make_pose(conf=conf))


def test_identity_alignment_is_exact(source_pose):
    assert apply_alignment(source_pose, SimilarityTransform.identity()) == source_pose


def test_scale_two_maps_point():
    kp = np.zeros((NUM_JOINTS, 3))
    kp[0] = (10, 20, 1)
    out = apply_alignment(Pose(kp, 100, 100), SimilarityTransform(2.0))
    assert tuple(out.keypoints[0]) == (20.0, 40.0, 1.0)
    assert out.keypoints[1, 2] == 0.0


def test_compose_matches_sequential_application(source_pose):
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = SimilarityTransform(rng.uniform(0.8, 1.2), rng.uniform(-0.2, 0.2), rng.uniform(-20, 20, 2))
        b = SimilarityTransform(rng.uniform(0.8, 1.2), rng.uniform(-0.2, 0.2), rng.uniform(-20, 20, 2))
        pts = rng.uniform(0, 500, (18, 2))
        assert np.abs(b.compose(a).apply(pts) - b.apply(a.apply(pts))).max() < 1e-9


def test_inverse_round_trip():
    tf = SimilarityTransform(1.7, 0.4, (12.0, -3.0))
    pts = np.random.default_rng(1).uniform(0, 100, (30, 2))
    assert np.abs(tf.inverse().apply(tf.apply(pts)) - pts).max() < 1e-12


def test_clamping_warns_with_count():
    pose = make_pose()
    with pytest.warns(OutOfCanvasWarning) as rec:
        out = apply_alignment(pose, SimilarityTransform(1.0, 0.0, (300.0, 0.0)))
    n_out = int(np.sum(STANDING[:, 0] + 300 > 511))
    assert rec[0].message.count == n_out
    assert out.xy[:, 0].max() == 511.0


def _random_similarity(rng, rotation):
    return SimilarityTransform(rng.uniform(0.5, 2.0), rng.uniform(-np.pi, np.pi) if rotation else 0.0,
                               tuple(rng.uniform(-100, 100, 2)))


@pytest.mark.parametrize("rotation", [False, True])
def test_alignment_recovers_anchors_over_random_transforms(rotation):
    rng = np.random.default_rng(42)
    canvas = 4000
    centred = STANDING - STANDING.mean(axis=0) + canvas / 2
    source = make_pose(centred, canvas=canvas)
    worst = 0.0
    for _ in range(500):
        gen = _random_similarity(rng, rotation)
        # transform about the canvas centre so the copy stays on the canvas
        target = make_pose(gen.apply(centred - canvas / 2) + canvas / 2, canvas=canvas)
        tf = estimate_alignment(source, target, allow_rotation=rotation)
        back = apply_alignment(target, tf)
        a = list(ANCHOR_JOINTS)
        worst = max(worst, float(np.sqrt(np.mean(np.sum((back.xy[a] - source.xy[a]) ** 2, axis=1)))))
    assert worst <= 1e-6


def test_alignment_preserves_distance_ratios():
    rng = np.random.default_rng(5)
    canvas = 4000
    pose = make_pose(STANDING - STANDING.mean(axis=0) + canvas / 2, canvas=canvas)
    to_origin = SimilarityTransform(1.0, 0.0, (-canvas / 2, -canvas / 2))
    back = SimilarityTransform(1.0, 0.0, (canvas / 2, canvas / 2))

    def lengths(p):
        return np.array([np.linalg.norm(p.xy[a] - p.xy[b]) for a, b in LIMBS])

    base = lengths(pose)
    for _ in range(100):
        out = apply_alignment(pose, back.compose(_random_similarity(rng, True).compose(to_origin)))
        got = lengths(out)
        assert np.abs(got / got[0] - base / base[0]).max() < 1e-9


# --- transitions --------------------------------------------------------------

def test_no_transition_frames(source_pose):
    assert interpolate_transition(source_pose, source_pose, 0) == []


def test_single_transition_is_the_midpoint():
    a = np.zeros((NUM_JOINTS, 3))
    b = np.zeros((NUM_JOINTS, 3))
    a[0] = (0, 0, 1)
    b[0] = (10, 10, 1)
    (mid,) = interpolate_transition(Pose(a, 64, 64), Pose(b, 64, 64), 1)
    assert tuple(mid.keypoints[0]) == (5.0, 5.0, 1.0)


@pytest.mark.parametrize("easing", ["linear", "smoothstep"])
def test_transition_paths_are_collinear_and_monotone(easing):
    rng = np.random.default_rng(9)
    a = make_pose(rng.uniform(0, 511, (NUM_JOINTS, 2)))
    b = make_pose(rng.uniform(0, 511, (NUM_JOINTS, 2)))
    frames = interpolate_transition(a, b, 3, easing=easing)
    assert len(frames) == 3
    for j in range(NUM_JOINTS):
        d = b.xy[j] - a.xy[j]
        path = [a.xy[j], *[f.xy[j] for f in frames], b.xy[j]]
        s = []
        for p in path:
            off = p - a.xy[j]
            assert abs(off[0] * d[1] - off[1] * d[0]) < 1e-9 * (1 + np.dot(d, d))
            s.append(np.dot(off, d) / np.dot(d, d))
        assert all(x < y for x, y in zip(s, s[1:]))


def test_linear_fractions_follow_k_over_t_plus_one():
    a, b = make_pose(STANDING), make_pose(STANDING + 40)
    frames = interpolate_transition(a, b, 4)
    for k, f in enumerate(frames, 1):
        assert np.allclose(f.xy, STANDING + 40 * k / 5, atol=1e-12)


def test_transition_endpoints_are_exact():
    from charanim.pose import blend_poses

    a, b = make_pose(STANDING), make_pose(STANDING * 0.9 + 13.7)
    for easing in ("linear", "smoothstep"):
        from charanim.pose import _ease
        assert blend_poses(a, b, _ease(0.0, easing)) == a
        assert blend_poses(a, b, _ease(1.0, easing)) == b


def test_missing_joints_propagate():
    conf_a = np.ones(NUM_JOINTS)
    conf_b = np.ones(NUM_JOINTS)
    conf_a[4] = 0.0
    conf_b[10] = 0.0
    frames = interpolate_transition(make_pose(conf=conf_a), make_pose(STANDING + 30, conf=conf_b), 5)
    for f in frames:
        assert f.keypoints[4, 2] == 0.0 and f.keypoints[10, 2] == 0.0
        assert np.all(f.keypoints[[0, 1, 2, 3], 2] > 0)


# --- target sequence --------------------------------------------------------

def test_degenerate_sequence(source_pose):
    seq = build_target_sequence(source_pose, [make_pose(STANDING + 30)], t=0)
    assert len(seq) == 2 and seq[0] is source_pose
    assert np.allclose(seq[1].xy, source_pose.xy, atol=1e-9)


def test_twelve_targets_three_transitions_gives_sixteen(source_pose):
    seq = build_target_sequence(source_pose, walking_clip(12, shift=15), t=3)
    assert len(seq) == 16
    assert seq.source_index_offset == 3
    assert seq[0] == source_pose
    assert np.array_equal(seq[0].keypoints, source_pose.keypoints)


def test_misaligned_clip_overlays_reference(source_pose):
    reference = walking_clip(8)
    gen = SimilarityTransform(0.8, 0.0, (60.0, 40.0))
    desired = [make_pose(gen.apply(p.xy)) for p in reference]
    seq = build_target_sequence(source_pose, desired, t=2)
    for got, ref in zip(seq.poses[3:], reference):
        rms = np.sqrt(np.mean(np.sum((got.xy - ref.xy) ** 2, axis=1)))
        assert rms <= 1.0


def test_alignment_error_names_frame(source_pose):
    conf = np.ones(NUM_JOINTS)
    conf[list(ANCHOR_JOINTS)] = 0.0
    clip = walking_clip(4)
    clip[2] = make_pose(conf=conf)
    with pytest.raises(AlignmentError) as info:
        build_target_sequence(source_pose, clip, t=1, per_frame=True)
    assert info.value.frame_index == 2


# --- drawing ------------------------------------------------------------------

def test_all_missing_draws_black():
    img = rasterize_pose(make_pose(conf=np.zeros(NUM_JOINTS)), 64, 48)
    assert img.shape == (48, 64, 3) and not img.any()


def test_rasterize_is_deterministic(source_pose):
    assert rasterize_pose(source_pose, 96, 96).tobytes() == rasterize_pose(source_pose, 96, 96).tobytes()


@pytest.mark.parametrize("use_numba", [False, True])
def test_single_joint_draws_one_disc(use_numba):
    if use_numba and not kernels.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    conf = np.zeros(NUM_JOINTS)
    conf[7] = 1.0
    xy = STANDING.copy()
    xy[7] = (40.3, 21.6)
    r = 5.0
    img = rasterize_pose(make_pose(xy, conf=conf, canvas=100), 100, 100, joint_radius=r, use_numba=use_numba)
    expected = np.zeros((100, 100), dtype=bool)
    for y in range(100):
        for x in range(100):
            expected[y, x] = (x - 40.3) ** 2 + (y - 21.6) ** 2 <= r * r
    lit = img.any(axis=2)
    assert np.array_equal(lit, expected)
    assert np.all(img[lit] == COLORS[7])


def test_limbs_to_missing_joints_are_skipped(source_pose):
    conf = np.ones(NUM_JOINTS)
    conf[3] = 0.0
    full = rasterize_pose(source_pose, 128, 128)
    part = rasterize_pose(make_pose(conf=conf), 128, 128)
    assert part.any(axis=2).sum() < full.any(axis=2).sum()
    elbow = (STANDING[3] * 128 / 512).round().astype(int)
    assert not part[elbow[1], elbow[0]].any()


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba unavailable")
def test_kernel_backends_agree():
    rng = np.random.default_rng(11)
    prims = np.column_stack([
        rng.integers(0, 2, 200).astype(float), rng.uniform(-10, 140, (200, 4)), rng.uniform(0.5, 6, 200)])
    colors = rng.integers(0, 256, (200, 3))
    a = kernels.draw_primitives(np.zeros((120, 130, 3), np.uint8), prims, colors, use_numba=True)
    b = kernels.draw_primitives(np.zeros((120, 130, 3), np.uint8), prims, colors, use_numba=False)
    assert np.array_equal(a, b)
    src = rng.integers(0, 5, (37, 23)).astype(np.uint8)
    for shape in ((8, 8), (50, 11), (1, 1)):
        assert np.array_equal(kernels.nearest_resample(src, *shape, use_numba=True),
                              kernels.nearest_resample(src, *shape, use_numba=False))


def test_env_flag_selects_numpy_path(source_pose, tmp_path):
    code = ("import numpy as np, sys\n"
            "from charanim import kernels\n"
            "from charanim.pose import Pose, rasterize_pose\n"
            "img = rasterize_pose(Pose(np.load(sys.argv[1]), 512, 512), 96, 96)\n"
            "np.save(sys.argv[2], img)\n"
            "print(kernels.HAVE_NUMBA)\n")
    np.save(tmp_path / "kp.npy", source_pose.keypoints)
    env = dict(os.environ, CHARANIM_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code, str(tmp_path / "kp.npy"), str(tmp_path / "img.npy")],
                         env=env, capture_output=True, text=True, check=True).stdout
    assert out.strip() == "False"
    assert np.array_equal(np.load(tmp_path / "img.npy"), rasterize_pose(source_pose, 96, 96))
