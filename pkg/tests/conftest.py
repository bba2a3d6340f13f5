import numpy as np
import pytest

from seqgrasp.geometry import load_object_library
from seqgrasp.hand_model import load_hand_model


@pytest.fixture(scope="session")
def hand():
    return load_hand_model()


@pytest.fixture(scope="session")
def objects():
    return load_object_library()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(hand, objects):
    """Validated sphere pinches, cylinder side grasps and their merges from short runs."""
    from seqgrasp.merge import merge_datasets
    from seqgrasp.synthesis import SynthesisConfig, synthesize
    from seqgrasp.validation import validate_records

    pinch = synthesize(hand, objects["sphere"], SynthesisConfig(style="pinch", n_candidates=128, seed=3))
    side = synthesize(hand, objects["cylinder"], SynthesisConfig(style="side", n_candidates=128, seed=3))
    vp = validate_records(hand, pinch.records, objects)
    vs = validate_records(hand, side.records, objects)
    merged = merge_datasets(hand, vp, vs, objects, 16, np.random.default_rng(0))
    return {"pinch": vp, "side": vs, "merged": merged}
