import numpy as np
import pytest

from halo.canonicalization import canonical_skeleton, pose_from_angles
from halo.training import TEMPLATE_BONE_LENGTHS, random_angles, random_shape


@pytest.fixture
def template_lengths():
    return TEMPLATE_BONE_LENGTHS.copy()


@pytest.fixture
def flat_hand():
    return canonical_skeleton(TEMPLATE_BONE_LENGTHS)


def make_random_skeletons(n, seed, vary_shape=True):
    """Valid posed skeletons drawn from the biomechanical angle ranges."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        lengths = random_shape(rng)[0] if vary_shape else TEMPLATE_BONE_LENGTHS
        out.append(pose_from_angles(lengths, random_angles(rng)))
    return out


@pytest.fixture
def random_skeletons():
    return make_random_skeletons
