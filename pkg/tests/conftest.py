import pytest

from wavefront.data import SyntheticSpec, generate_synthetic, load_manifest


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """16/8/8 utterance corpus shared by training-path tests."""
    root = tmp_path_factory.mktemp("corpus_small")
    spec = SyntheticSpec(
        seed=123, n_train_per_class=8, n_valid_per_class=4, n_test_per_class=4
    )
    generate_synthetic(spec, root)
    return load_manifest(root / "manifest.csv"), root
