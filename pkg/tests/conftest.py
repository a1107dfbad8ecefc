import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvsample import field

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def planted():
    """4-region field with known latent ranks, shared across modules."""
    return field.gen_synthetic(field.SyntheticConfig(grid=(64, 64), d=8, n_regions=4, ranks=(1, 2, 3, 4), layout="blocks", seed=7))


def random_field(rng, grid=(16, 12), d=4) -> field.MultivariateField:
    n = int(np.prod(grid))
    return field.MultivariateField(grid, [f"v{j}" for j in range(d)], rng.standard_normal((n, d)) * rng.uniform(0.5, 3, d))


ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record(criterion: int, ok: bool | None, detail: str) -> None:
    """Remember a criterion outcome for the end-of-run summary; ``None`` marks a skip."""
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    if criterion in ACCEPTANCE:
        # parametrized runs share a line: any failure wins, then any pass
        prev, old = ACCEPTANCE[criterion]
        status = min(prev, status, key=["FAIL", "PASS", "SKIP"].index)
        detail = f"{old} | {detail}"
    ACCEPTANCE[criterion] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
