import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from harmcoords.fem import VolumeQuadrature  # noqa: E402
from harmcoords.mesh import generate_ball_mesh  # noqa: E402
from harmcoords.metric import boundary_geometry, make_metric  # noqa: E402
from harmcoords.norms import TraceNormContext  # noqa: E402
from harmcoords.pipeline import RunConfig, run_pipeline  # noqa: E402

_MESHES = {}
_RUNS = {}


def ball(h, radius=1.0):
    key = (h, radius)
    if key not in _MESHES:
        _MESHES[key] = generate_ball_mesh(h, radius=radius)
    return _MESHES[key]


class Setup:
    """Mesh, metric, quadrature, boundary geometry and trace-norm context in one bundle."""

    def __init__(self, h, family="flat", eps=0.0, radius=1.0):
        self.mesh = ball(h, radius)
        self.metric = make_metric(family, eps, probe_radius=radius)
        self.quad = VolumeQuadrature(self.mesh, self.metric)
        self.bg = boundary_geometry(self.metric, self.mesh.boundary, self.mesh)
        self.ctx = TraceNormContext(self.quad, self.bg)


def pipeline_run(**kw):
    """Cached pipeline report plus state, keyed by the config overrides."""
    key = tuple(sorted(kw.items()))
    if key not in _RUNS:
        _RUNS[key] = run_pipeline(RunConfig(**kw), keep_state=True)
    return _RUNS[key]


@pytest.fixture(scope="session")
def flat03():
    return Setup(0.3)


@pytest.fixture(scope="session")
def flat05():
    return Setup(0.5)


@pytest.fixture(scope="session")
def conf03():
    return Setup(0.3, "conformal", 0.02)


ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
