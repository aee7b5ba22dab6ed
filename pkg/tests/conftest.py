import numpy as np
import pytest

from coherent3d.synthscene import FigureSpec, generate_figure, generate_scene, render_scene


@pytest.fixture(scope="session")
def tpose():
    spec = FigureSpec.default(1.8, seed=0)
    return spec, generate_figure(spec)


@pytest.fixture(scope="session")
def small_scene():
    """Three figures, two 64x64 views."""
    rig = dict(radius=6.0, height=1.2, target=[0.0, 0.9, 0.0], image_size=[64, 64], fov_deg=45.0)
    scene = generate_scene("s0", 3, n_persons=3, n_views=2, rig=rig)
    meshes = scene.meshes()
    return scene, meshes, render_scene(scene, meshes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(n, name, ok, detail):
        line = f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.acceptance_lines.append((n, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
