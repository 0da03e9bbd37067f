import numpy as np
import pytest

from srae.data import Batch
from srae.losses import FeatureExtractor
from srae.model import SraeHyper, init_params

# 8x8 images keep graph evaluations fast enough for exhaustive checks
SMALL = SraeHyper(image_h=8, image_w=8, a=2, b=2, k=3, j=2, m=2,
                  trunk_width=4, stream_width=4, decoder_width=4, disc_width=5)


@pytest.fixture
def small_hyper():
    return SMALL


@pytest.fixture(params=["one-disc", "two-disc"])
def variant(request):
    return request.param


@pytest.fixture
def small_extractor():
    return FeatureExtractor.create(1, widths=(3, 4), seed=7)


def small_batch(seed=0, n=4, hyper=SMALL):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(n,) + hyper.image_shape).astype(np.float32)
    labels = np.arange(n) % hyper.m
    return Batch(images, labels, np.arange(n))


def small_eps(seed=0, n=4, hyper=SMALL):
    rng = np.random.default_rng(seed + 1000)
    return {
        "eps_c": rng.standard_normal((n,) + hyper.content_shape).astype(np.float32),
        "eps_d": rng.standard_normal((n, 1, 1, hyper.j)).astype(np.float32),
    }


@pytest.fixture
def small_params(variant):
    return init_params(SMALL, variant, seed=0)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance gate, one line per criterion, if it ran."""
    import sys

    module = sys.modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        ok, detail = module.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
