import pytest

from altalign.synthetic import SynthConfig, gen_synthetic_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """A quick corpus for plumbing tests; not sized for convergence."""
    return gen_synthetic_corpus(SynthConfig(seed=3, concepts=5, dim=8, pairs_per_class=60,
                                            eval_images=6, items_per_class=2))
