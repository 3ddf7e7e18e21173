import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adaptive_depth.backbone import Backbone, BackboneConfig

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def tiny_config():
    return BackboneConfig(num_layers=3, d_model=8, num_heads=2, num_classes=3, vocab_size=11, max_len=6)


@pytest.fixture
def tiny_backbone(tiny_config):
    bb = Backbone.create(tiny_config, np.random.default_rng(7))
    # non-trivial norms and biases so every code path carries signal
    rng = np.random.default_rng(8)
    for name, v in bb.params.items():
        if name.endswith((".g", ".b", "b1", "b2")):
            bb.params[name] = v + rng.normal(0, 0.3, v.shape)
        elif name.split(".")[-1] in ("wq", "wk", "wv", "wo", "w1", "w2", "w"):
            bb.params[name] = rng.normal(0, 0.4, v.shape)
    return bb
