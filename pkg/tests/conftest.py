import numpy as np
import pytest

import metaxt as mxt
from tests.mxtutil import random_triple, scale_ltn_output, tiny_model


@pytest.fixture(scope="session")
def tiny():
    return tiny_model()


@pytest.fixture(scope="session")
def tiny_rtn():
    return tiny_model(use_rtn=True)


@pytest.fixture(scope="session")
def tiny_params(tiny):
    return scale_ltn_output(tiny.init_params(np.random.default_rng(1)))


@pytest.fixture(scope="session")
def tiny_batch():
    return random_triple(np.random.default_rng(2))


@pytest.fixture(scope="session")
def granularity_pair():
    return mxt.gen_granularity_pair(1, n_source=1000, n_target_pool=400, noise_sigma=0.5)


@pytest.fixture(scope="session")
def separable_pair():
    return mxt.gen_granularity_pair(3, n_source=1000, n_target_pool=300, noise_sigma=0.0)


@pytest.fixture(scope="session")
def tagset_pair():
    return mxt.gen_tagset_pair(1, n_sentences=120)


@pytest.fixture
def conll_file(tmp_path):
    text = (
        "# three sentences\n"
        "The\tO\nbank\tB-ORG\nsaid\tO\n"
        "\n"
        "Kim\tB-PER\nLee\tI-PER\nleft\tO\nParis\tB-LOC\n"
        "\n"
        "# comment inside\n"
        "Yes\tO\n"
    )
    path = tmp_path / "small.conll"
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def small_config():
    return mxt.RunConfig(
        n_source=1000,
        n_target_pool=200,
        noise_sigma=0.5,
        input_dim=6,
        hidden_dims=(8,),
        h_dim=6,
        z_dim=3,
        k=10,
        seeds=(1, 2),
        step_budget=20,
        eval_every=10,
    )
