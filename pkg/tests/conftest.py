import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from larp.config import RunConfig
from larp.trainer import build_models

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")


def tiny_config(**overrides) -> RunConfig:
    """A model small enough for sub-second forward/backward passes."""
    base = dict(
        seed=0, num_classes=4, num_clips=16, frames=4, height=8, width=8, f_t=2, f_h=4, f_w=4,
        d=16, heads=2, enc_depth=1, dec_depth=1, n_tokens=4, codebook_size=16, code_dim=4, mlp_ratio=2,
        prior_d=16, prior_depth=1, prior_heads=2, total_steps=20, warmup_steps=2, batch_size=2,
        gen_d=16, gen_depth=1, gen_heads=2, gen_steps=10, gen_warmup_steps=2, gen_batch_size=4,
        cond_frames=2,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture
def tiny_models(tiny_cfg):
    return build_models(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -------------------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """``report(k, ok, detail)`` records the one-line verdict for acceptance criterion ``k``."""
    def record(k: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[k] = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[k])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture(scope="session")
def acceptance_run():
    """The desk-scale training run shared by criterion 5 and the trained-model checks."""
    from acceptance_runs import desk_run
    return desk_run()
