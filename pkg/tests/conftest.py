import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from comma_workbench.encoders import Backbone, ModelConfig, TextEncoderConfig, VisionEncoderConfig  # noqa: E402
from comma_workbench.numerics import Tensor  # noqa: E402


def toy_model_config(layers=1, heads=1, width_v=4, width_l=6, joint=3, image_side=2, patch_size=1,
                     channels=1, seq_len=4, vocab=12):
    return ModelConfig(
        vision=VisionEncoderConfig(image_side=image_side, channels=channels, patch_size=patch_size,
                                   width=width_v, layers=layers, heads=heads, joint_dim=joint),
        text=TextEncoderConfig(vocab_size=vocab, seq_len=seq_len, width=width_l, layers=layers, heads=heads,
                               joint_dim=joint),
    )


def toy_backbone(config=None, seed=0, jitter=0.1):
    """Random backbone whose layer-norm gains and biases are also perturbed,
    so an oracle that ignores any parameter would disagree."""
    bb = Backbone.initialize(config or toy_model_config(), seed)
    rng = np.random.default_rng([seed, 99])
    for name, t in bb.params.items():
        if name.rsplit(".", 1)[-1] in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "bq", "bk", "bv", "bo", "b1", "b2"):
            bb.params[name] = Tensor(t.data + jitter * rng.normal(size=t.shape))
    return bb


@pytest.fixture
def toy():
    return toy_backbone()


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def record_criterion(number, title, ok, detail=""):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
