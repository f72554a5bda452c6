import numpy as np
import pytest

from dermscreen.data import Roi


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_box(rng, max_coord=100.0, max_size=40.0) -> Roi:
    return Roi(
        x_center=float(rng.uniform(0, max_coord)),
        y_center=float(rng.uniform(0, max_coord)),
        width=float(rng.uniform(1.0, max_size)),
        height=float(rng.uniform(1.0, max_size)),
    )
