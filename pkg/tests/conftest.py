import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protoseg.features import ColorHashExtractor  # noqa: E402
from protoseg.pipeline import build_bank  # noqa: E402
from protoseg.synthetic import SyntheticGenerator, SyntheticProposer, default_scene  # noqa: E402
from protoseg.vocabulary import make_vocabulary  # noqa: E402


@pytest.fixture(scope="session")
def scene():
    return default_scene()


@pytest.fixture(scope="session")
def small_build(tmp_path_factory, scene):
    """A cached N=8, K=4 bank over the synthetic scene."""
    cache = tmp_path_factory.mktemp("support")
    gen = SyntheticGenerator(scene)
    ex = ColorHashExtractor()
    vocab = make_vocabulary(list(scene.classes), 0)
    bank = build_bank(vocab, gen, SyntheticProposer(gen), [ex], n=8, k=4, cache_dir=cache)
    return {"bank": bank, "cache": cache, "extractor": ex, "vocab": vocab, "generator": gen}
