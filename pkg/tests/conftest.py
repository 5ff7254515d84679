import numpy as np
import pytest
import torch

from darkadapt.data import Domain, Image

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_image(rng, h=16, w=16, domain=Domain.H, image_id="img"):
    px = rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)
    return Image(pixels=px, domain=domain, id=image_id)


@pytest.fixture
def random_image(rng):
    return make_image(rng)
