import numpy as np
import pytest

from mscg.geometry import TemplateSpec, build_template
from mscg.mapping import KlModel


@pytest.fixture(scope="session")
def rod_template():
    spec = TemplateSpec(kind="rod", symmetry="square", cell_size=1.0, R0=0.2, order=2, h=0.2,
                        eps_in=11.4)
    return build_template(spec, name="rod")


@pytest.fixture(scope="session")
def rod_template_p3():
    spec = TemplateSpec(kind="rod", symmetry="square", cell_size=1.0, R0=0.3, order=3, h=0.25,
                        eps_in=4.0)
    return build_template(spec, name="rod3")


@pytest.fixture(scope="session")
def hex_rod_template():
    spec = TemplateSpec(kind="rod", symmetry="triangular", cell_size=1.0, R0=275 / 800,
                        order=2, h=0.15, eps_in=1.0, eps_out=12.1)
    return build_template(spec, name="hole")


@pytest.fixture(scope="session")
def plain_template():
    spec = TemplateSpec(kind="plain", symmetry="square", cell_size=1.0, order=2, h=0.2)
    return build_template(spec, name="plain")


@pytest.fixture(scope="session")
def kl_model():
    return KlModel(D=10, sigma=0.02, Lc=1.0 / 16.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance line; printed by the terminal summary hook."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
