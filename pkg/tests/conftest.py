import numpy as np
import pytest
import torch

from fewshot_adapt.models import ModelConfig, build_models

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return ModelConfig(image_size=16, channels=3, latent_dim=8, g_base=16, g_min=8, d_base=8, d_max=16)


@pytest.fixture
def tiny_models(tiny_config):
    return build_models(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_target(tiny_config):
    from fewshot_adapt.data import FewShotDataset

    r = np.random.default_rng(7)
    imgs = np.tanh(r.standard_normal((5, 3, tiny_config.image_size, tiny_config.image_size))).astype(np.float32)
    return FewShotDataset(imgs)


@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory):
    """The packaged shape-world ablation, run once per session (~12 min on one CPU)."""
    from fewshot_adapt.experiments import AblationScenario, run_ablation

    out = tmp_path_factory.mktemp("ablation")
    return run_ablation(AblationScenario(), out), out


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(tag, ok, detail)``; asserts ``ok``."""
    def record(tag, ok, detail=""):
        _ACCEPTANCE.append((tag, bool(ok), detail))
        assert ok, f"{tag}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for tag, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {tag}  {detail}")


def pytest_collection_modifyitems(items):
    for item in items:
        if "ablation_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
