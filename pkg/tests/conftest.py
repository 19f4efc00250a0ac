import numpy as np
import pytest

from hfcvp.data import ToyCorpusConfig, generate_toy_corpus, load_features, estimate_prior
from hfcvp.networks import NetworkConfig


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Small 4-class corpus shared by unit tests (not the acceptance corpus)."""
    root = tmp_path_factory.mktemp("toy_small")
    cfg = ToyCorpusConfig(
        num_classes=4, utterances_per_class=12, min_frames=30, max_frames=60, seed=7
    )
    manifest = generate_toy_corpus(cfg, root)
    features = load_features(manifest, root)
    prior = estimate_prior(manifest.labels(), manifest.num_classes)
    return {"root": root, "manifest": manifest, "features": features, "prior": prior}


@pytest.fixture(scope="session")
def tiny_net_cfg():
    """Even smaller than the toy preset; for step-level mechanics tests."""
    return NetworkConfig(
        num_classes=4,
        hider_channels=16,
        finder_gru_size=24,
        finder_gru_layers=1,
        combiner_dim=32,
        combiner_heads=2,
        combiner_layers=1,
        combiner_ffn_dim=48,
        postnet_channels=24,
        postnet_layers=2,
    )


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def random_simplex(rng, n, c):
    """Row-stochastic matrix sampled uniformly from the simplex."""
    g = rng.gamma(1.0, 1.0, size=(n, c))
    return g / g.sum(axis=1, keepdims=True)
