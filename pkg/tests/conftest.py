import numpy as np
import pytest
from PIL import Image

from charanim.backend import ToyDenoiser
from charanim.pose import NUM_JOINTS, Pose, write_pose_file

CANVAS = 512

# a standing figure on a 512 x 512 canvas, COCO-18 order
STANDING = np.array([
    [256, 90], [256, 140], [216, 142], [200, 210], [196, 270], [296, 142], [312, 210], [316, 270],
    [230, 280], [228, 370], [226, 450], [282, 280], [284, 370], [286, 450],
    [248, 80], [264, 80], [238, 86], [274, 86],
], dtype=np.float64)


def make_pose(xy=STANDING, conf=None, canvas=CANVAS):
    kp = np.zeros((NUM_JOINTS, 3))
    kp[:, :2] = xy
    kp[:, 2] = 1.0 if conf is None else conf
    kp[kp[:, 2] == 0, :2] = 0.0
    return Pose(kp, canvas, canvas)


def walking_clip(n, shift=0.0):
    """``n`` poses swinging arms and legs, translated by ``shift`` pixels."""
    poses = []
    for k in range(n):
        xy = STANDING.copy()
        a = 30.0 * np.sin(2 * np.pi * k / max(n, 1))
        xy[[3, 4], 0] += [a * 0.5, a]
        xy[[6, 7], 0] -= [a * 0.5, a]
        xy[[9, 10], 0] += [a * 0.3, a * 0.6]
        xy[[12, 13], 0] -= [a * 0.3, a * 0.6]
        xy[:, 0] += shift
        poses.append(make_pose(xy))
    return poses


@pytest.fixture(scope="session")
def backend():
    return ToyDenoiser(seed=0)


@pytest.fixture(scope="session")
def source_pose():
    return make_pose()


@pytest.fixture(scope="session")
def fixture_files(tmp_path_factory):
    """Source image, character mask and pose file shared by the end-to-end tests."""
    root = tmp_path_factory.mktemp("inputs")
    yy, xx = np.mgrid[0:256, 0:256]
    bg = (40 + 0.4 * xx + 0.2 * yy).astype(np.float64)
    body = ((xx - 128) / 34.0) ** 2 + ((yy - 140) / 90.0) ** 2 <= 1.0
    head = (xx - 128) ** 2 + (yy - 46) ** 2 <= 20 ** 2
    fig = body | head
    img = np.where(fig, 220.0, bg).astype(np.uint8)
    Image.fromarray(img).convert("RGB").save(root / "source.png")
    Image.fromarray((fig * 255).astype(np.uint8)).save(root / "mask.png")
    write_pose_file(root / "pose.json", walking_clip(20, shift=20.0), source=make_pose())
    return {"image": str(root / "source.png"), "source_mask": str(root / "mask.png"),
            "pose": str(root / "pose.json"), "root": root}
