import numpy as np
import pytest

from cradapt.bench import RING_REFERENCE, parse_config, run

_CRITERIA = {}


def record_criterion(number, passed, detail):
    """Remember an acceptance verdict; printed in the terminal summary."""
    _CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def _adapt_run(out, marking):
    cfg = parse_config(overrides={"mode": "adapt", "domain": "square_ring", "marking": marking,
                                  "theta": 0.5, "max_dof": 50_000, "nev": 3, "seed": 0,
                                  "out": str(out), "timing": False})
    return run(cfg)


@pytest.fixture(scope="session")
def ring_cluster_run(tmp_path_factory):
    """Square ring, cluster-sum marking on {2, 3}, theta 0.5, 50k CR DOFs."""
    out = tmp_path_factory.mktemp("ring_cluster")
    res = _adapt_run(out, "cluster")
    res["out"] = out
    return res


@pytest.fixture(scope="session")
def ring_single3_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ring_single3")
    res = _adapt_run(out, "single:3")
    res["out"] = out
    return res


@pytest.fixture(scope="session")
def ring_reference():
    """Aitken references for the three smallest ring eigenvalues.

    lambda_1 comes from conforming P1 values on uniform levels 4, 5, 6
    (16k to 65k DOFs); the double eigenvalue uses the shipped constant.
    """
    from cradapt.bench import uniform_reference
    from cradapt.mesh import make_square_ring

    _, est = uniform_reference(make_square_ring(), levels=3, nev=3, start=4)
    return np.array([est[0].value, RING_REFERENCE, RING_REFERENCE]), est
