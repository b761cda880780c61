import numpy as np
import pytest

from hdkd import models as M
from hdkd import tensor as T
from hdkd.dflt import DfltConfig


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# tiny trunk: 16x16 input, stem stride 2 -> 8x8, stages 4x4 / 4x4 / 2x2
TINY_TEACHER = M.TeacherSpec(blocks=(2, 2, 2), channels=(4, 8, 8), image_size=16, ca_reduction=4)
TINY_STUDENT = M.StudentSpec(blocks=(1, 1, 1), channels=(4, 8, 8), image_size=16, ca_reduction=4,
                             dflt=DfltConfig(layers=1, patch=(1, 1), embed_dim=8, heads=2, head_dim=4))


@pytest.fixture
def tiny_specs():
    return TINY_TEACHER, TINY_STUDENT


@pytest.fixture
def tiny_split():
    from hdkd.trainer import synthetic_dataset

    return synthetic_dataset(24, image_size=16, num_classes=3, seed=5)
