import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from radlab import corpus as C
from radlab import model as M
from radlab.tokenizer import train_vocab

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def rad_reports():
    return C.synth_corpus(7, "radiology", 200)


@pytest.fixture(scope="session")
def small_vocab(rad_reports):
    texts = [C.midtrain_sequence(r) for r in rad_reports]
    return train_vocab(texts, vocab_size=400, num_sentinels=20)


@pytest.fixture(scope="session")
def tiny_config():
    return M.ModelConfig(vocab_size=40, d_model=8, n_heads=2, d_ff=12, n_enc_layers=1, n_dec_layers=1,
                         rel_pos_buckets=8, rel_pos_max_distance=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
