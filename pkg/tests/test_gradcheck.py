"""The finite-difference audit itself: coverage, thresholds, negative control."""

import numpy as np
import pytest

from rankuncert import gradcheck as gc

REQUIRED = {"loss_cl", "loss_cs_pair", "loss_cs_total", "loss_dr",
            "loss_total", "ua_forward", "chain_forward", "combine",
            "layer_norm"}


def test_registry_covers_every_component():
    assert REQUIRED == set(gc.COMPONENTS)


def test_grid_covers_all_sizes():
    seen = {gc._grid(i) for i in range(18)}
    assert seen == {(b, d, n) for b in (2, 4, 8) for d in (8, 16, 64)
                    for n in (1, 2)}


@pytest.mark.parametrize("name", sorted(REQUIRED))
def test_component_passes_at_reduced_count(name):
    report = gc.run_component(name, seed=0, instances=12)
    assert report.passed, report.line()
    assert report.max_relerr < gc.THRESHOLD


def test_negative_control_detached_gradient_fails():
    # d/dx of (detach(x) * x) is x under the tape but 2x in truth
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(6)

    def wrong(t):
        return (t.detach() * t).sum()

    relerr, _ = gc.compare_build(wrong, x0, rng)
    assert relerr > gc.THRESHOLD


def test_negative_control_reaches_exit_code(monkeypatch):
    # wire the broken build through the component machinery
    def broken_factory(rng, i):
        x0 = rng.standard_normal(4)
        return x0, lambda t: (t.detach() * t).sum()

    monkeypatch.setitem(gc.COMPONENTS, "layer_norm", broken_factory)
    assert gc.main(["--component", "layer_norm", "--instances", "3"]) == 1


def test_main_exit_zero(capsys):
    assert gc.main(["--component", "loss_cl", "--instances", "5"]) == 0
    out = capsys.readouterr().out
    assert "loss_cl" in out and "pass" in out


def test_compare_build_matches_simple_quadratic():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal(5)
    relerr, k = gc.compare_build(lambda t: (t * t).sum(), x0, rng)
    assert relerr < 1e-8
    assert k == 3
