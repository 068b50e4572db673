import numpy as np
import pytest

from elastic_supernet import numerics as nx
from elastic_supernet.backbone import BackboneSpec, SubmodelConfig


@pytest.fixture(autouse=True)
def f64():
    with nx.precision("f64"):
        yield


def toy_spec(**over) -> BackboneSpec:
    kw = dict(L=4, E_max=64, d_head=8, H_max=8, R_max=4.0, N=9, num_classes=4,
              E_min=32, H_min=4, R_min=0.5, R_step=0.5, in_dim=16)
    kw.update(over)
    return BackboneSpec(**kw)


def tiny_spec(**over) -> BackboneSpec:
    kw = dict(L=2, E_max=16, d_head=4, H_max=4, R_max=2.0, N=5, num_classes=3,
              E_min=8, H_min=1, R_min=0.5, R_step=0.5, in_dim=6)
    kw.update(over)
    return BackboneSpec(**kw)


def random_config(spec: BackboneSpec, rng: np.random.Generator, skip_p: float = 0.2) -> SubmodelConfig:
    L = spec.L
    return SubmodelConfig(
        R=tuple(rng.choice(spec.ratio_choices) for _ in range(L)),
        H=tuple(int(rng.integers(spec.H_min, spec.H_max + 1)) for _ in range(L)),
        E=int(rng.choice(spec.width_choices)),
        D_mlp=tuple(bool(rng.random() > skip_p) for _ in range(L)),
        D_mha=tuple(bool(rng.random() > skip_p) for _ in range(L)),
    )


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    err = np.abs(analytic - numeric).max()
    assert err <= rtol * scale + atol, f"max abs error {err:.3e} vs scale {scale:.3e}"


# -- acceptance reporting -----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
