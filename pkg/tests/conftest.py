import os

for _v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_v, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from kinoformer import adcore as ad  # noqa: E402


@pytest.fixture(autouse=True)
def _float64_default():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture(scope="session")
def small_corpus():
    from kinoformer.terrainsim import CorpusSpec, generate_corpus

    return [c[0] for c in generate_corpus(CorpusSpec(total_steps=900, seed=3))]
