import csv

import numpy as np
import pytest

from tomo4d.forward import LINEAR, SINGLE_SCATTER, ImageSet, OpticsModel, Renderer
from tomo4d.geometry import ring_views
from tomo4d.grid import CarveMask, FieldSequence, VoxelGrid
from tomo4d.metrics import average_metrics
from tomo4d.phantom import PhantomSpec, generate
from tomo4d.recon import (NumericalError, ReconConfig, ReconProblem, cost, grad_hidden, mix_rows,
                          reconstruct_4d, reconstruct_static)
from tomo4d.temporal import INFINITE, kernel_build

from oracles import central_difference, literal_cost, literal_grad, max_relative_error
from scenes import random_problem, small_grid, two_view_epoch


def render_fn(renderer):
    return lambda t, state: renderer.render(t, state.ravel(order="F")).images


def grad_fn(renderer):
    return lambda t, state, resid: renderer.gradient(t, state.ravel(order="F"), resid).reshape(
        renderer.grid.shape, order="F")


def data_lists(data):
    return [list(d.images) for d in data]


def test_mix_rows_matches_matmul():
    rng = np.random.default_rng(0)
    w, x = rng.uniform(size=(4, 4)), rng.normal(size=(4, 30))
    np.testing.assert_allclose(mix_rows(w, x), w @ x, rtol=1e-14)


def test_cost_of_perfect_model_is_zero():
    renderer, _, hidden = random_problem(0, SINGLE_SCATTER)
    kernel = kernel_build(hidden.times, 15.0)
    states = FieldSequence.from_stack(renderer.grid, hidden.times, mix_rows(kernel.weights, hidden.stack()))
    data = renderer.render_all(states.stack())
    assert cost(hidden, data, renderer, kernel) <= 1e-10


def test_cost_of_constant_image_against_zero_data():
    grid = small_grid()
    ep = two_view_epoch(grid)
    renderer = Renderer(grid, [ep], OpticsModel(mode=LINEAR, background=1.0), gain=0.6)
    zeros = [ImageSet(0.0, tuple(np.zeros((c.rows, c.cols)) for c in ep.cameras))]
    hidden = FieldSequence.from_stack(grid, [0.0], np.zeros((1, grid.size)))
    p = sum(c.rows * c.cols for c in ep.cameras)
    assert cost(hidden, zeros, renderer, kernel_build([0.0], INFINITE)) == pytest.approx(p * 0.6 ** 2 / 2, rel=1e-12)


@pytest.mark.parametrize("mode", [LINEAR, SINGLE_SCATTER])
def test_cost_matches_literal_sum(mode):
    renderer, data, hidden = random_problem(1, mode, n_state=2)
    kernel = kernel_build(hidden.times, 12.0)
    grids = [s.values for s in hidden.states]
    expect = literal_cost(grids, hidden.times, 12.0, data_lists(data), render_fn(renderer))
    assert cost(hidden, data, renderer, kernel) == pytest.approx(expect, rel=1e-10)


@pytest.mark.parametrize("sigma", [INFINITE, 8.0])
def test_grad_matches_literal_weighted_sum(sigma):
    renderer, data, hidden = random_problem(2, SINGLE_SCATTER)
    kernel = kernel_build(hidden.times, sigma)
    grids = [s.values for s in hidden.states]
    gs = [grad_hidden(hidden, data, renderer, kernel, t) for t in range(3)]
    for t in range(3):
        ref = literal_grad(grids, hidden.times, sigma, data_lists(data), render_fn(renderer), grad_fn(renderer), t)
        np.testing.assert_allclose(gs[t], ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())
    if sigma == INFINITE:
        assert np.array_equal(gs[0], gs[1]) and np.array_equal(gs[1], gs[2])
        per_epoch = [grad_fn(renderer)(t, hidden.states[0].values * 0 + sum(grids) / 3,
                                       [p - y for p, y in zip(render_fn(renderer)(t, sum(grids) / 3), data[t].images)])
                     for t in range(3)]
        np.testing.assert_allclose(gs[0], sum(per_epoch) / 3, rtol=1e-10, atol=1e-12 * np.abs(gs[0]).max())


@pytest.mark.parametrize("mode", [LINEAR, SINGLE_SCATTER])
def test_grad_matches_finite_differences(mode):
    renderer, data, hidden = random_problem(3, mode)
    kernel = kernel_build(hidden.times, 10.0)
    problem = ReconProblem(renderer, data, kernel)
    x = hidden.stack()
    fd = central_difference(lambda v: problem.value(v.reshape(x.shape)), x.ravel(), 1e-3).reshape(x.shape)
    for t in range(3):
        g = grad_hidden(hidden, data, renderer, kernel, t).ravel(order="F")
        assert max_relative_error(g, fd[t]) <= 1e-4


def test_single_state_reduces_to_static_gradient():
    renderer, data, hidden = random_problem(4, SINGLE_SCATTER, n_state=1)
    g = grad_hidden(hidden, data, renderer, kernel_build(hidden.times, 20.0), 0).ravel(order="F")
    resid = [p - y for p, y in zip(renderer.render(0, hidden.stack()[0]).images, data[0].images)]
    assert np.array_equal(g, renderer.gradient(0, hidden.stack()[0], resid))


def test_tiny_sigma_decouples_states():
    renderer, data, hidden = random_problem(5, LINEAR)
    kernel = kernel_build(hidden.times, 1e-9)
    assert np.abs(kernel.weights - np.eye(3)).max() < 1e-12
    for t in range(3):
        state = hidden.stack()[t]
        resid = [p - y for p, y in zip(renderer.render(t, state).images, data[t].images)]
        np.testing.assert_allclose(grad_hidden(hidden, data, renderer, kernel, t).ravel(order="F"),
                                   renderer.gradient(t, state, resid), rtol=0, atol=1e-10)


def test_zero_residual_zero_gradient():
    renderer, _, hidden = random_problem(6, SINGLE_SCATTER)
    kernel = kernel_build(hidden.times, 10.0)
    data = renderer.render_all(mix_rows(kernel.weights, hidden.stack()))
    for t in range(3):
        assert np.all(grad_hidden(hidden, data, renderer, kernel, t) == 0.0)


def test_mismatches_raise():
    renderer, data, hidden = random_problem(7, LINEAR)
    with pytest.raises(ValueError):
        grad_hidden(hidden, data, renderer, kernel_build([0.0, 1.0, 2.0], 10.0), 0)
    with pytest.raises(ValueError):
        cost(hidden, data[:2], renderer, kernel_build(hidden.times, 10.0))
    with pytest.raises(ValueError):
        reconstruct_4d([], [], ReconConfig(), OpticsModel(), grid=renderer.grid)
    bad = [ImageSet(d.time, tuple(np.full_like(im, np.nan) for im in d.images)) for d in data]
    with pytest.raises(ValueError):
        reconstruct_4d(bad, renderer.epochs, ReconConfig(max_iters=2), renderer.optics, grid=renderer.grid)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_non_finite_cost_aborts():
    renderer, data, _ = random_problem(8, LINEAR)
    huge = [d.map(lambda im: np.full_like(im, 1e200)) for d in data]
    with pytest.raises(NumericalError):
        reconstruct_4d(huge, renderer.epochs, ReconConfig(max_iters=2), renderer.optics, grid=renderer.grid)


@pytest.mark.parametrize("method", ["lbfgsb", "gradient"])
def test_solver_invariants(method):
    renderer, data, _ = random_problem(9, SINGLE_SCATTER)
    grid = renderer.grid
    flags = np.zeros(grid.shape, dtype=bool)
    flags[1:3, 1:3, :] = True
    cfg = ReconConfig(sigma=10.0, max_iters=25, upper_bound=12.0, method=method, mask=CarveMask(grid, flags))
    seen = []
    import tomo4d.recon as recon_mod

    orig = recon_mod.IterationLog.__call__

    def spy(self, it, x, f, gnorm):
        seen.append(x.copy())
        orig(self, it, x, f, gnorm)

    recon_mod.IterationLog.__call__ = spy
    try:
        states, rs = reconstruct_4d(data, renderer.epochs, cfg, renderer.optics, grid=grid,
                                    truth=FieldSequence.from_stack(grid, [0, 10, 20], np.ones((3, grid.size))))
    finally:
        recon_mod.IterationLog.__call__ = orig
    assert len(seen) == len(rs.cost_history) > 2
    outside = ~flags.ravel(order="F")
    for x in seen:
        assert np.all(x[:, outside] == 0.0)
        assert np.all(x >= 0.0) and np.all(x <= 12.0)
    assert np.all(np.diff(rs.cost_history) <= 0.0)
    assert np.all(states.stack()[:, outside] == 0.0)


def test_zero_data_drives_cost_down():
    # with a black surface the empty field renders black, so zero data has a zero-cost minimum
    renderer, data, _ = random_problem(10, SINGLE_SCATTER, albedo=0.0)
    zeros = [d.map(np.zeros_like) for d in data]
    _, rs = reconstruct_4d(zeros, renderer.epochs, ReconConfig(sigma=10.0, max_iters=50), renderer.optics,
                           grid=renderer.grid)
    assert rs.cost_history[-1] <= 0.1 * rs.cost_history[0]


def test_deterministic_history():
    renderer, data, _ = random_problem(11, SINGLE_SCATTER)
    cfg = ReconConfig(sigma=10.0, max_iters=15)
    a = reconstruct_4d(data, renderer.epochs, cfg, renderer.optics, grid=renderer.grid)[1]
    b = reconstruct_4d(data, renderer.epochs, cfg, renderer.optics, grid=renderer.grid)[1]
    assert a.cost_history == b.cost_history


def static_toy():
    grid = VoxelGrid(8, 8, 8, 50.0, 50.0, 50.0, (0.0, 0.0, 500.0))
    truth = generate(PhantomSpec(peak=5.0, duration=20.0, sample_period=10.0), grid)
    epochs = [ring_views(3, 90.0, 10e3, grid.center, heading=30.0 * k, gsd=40.0, grid=grid, time=t)
              for k, t in enumerate(truth.times)]
    optics = OpticsModel(mode=LINEAR)
    data = Renderer(grid, epochs, optics).render_all(truth.stack())
    return grid, truth, epochs, optics, data


def test_static_toy_closed_loop():
    grid, truth, epochs, optics, data = static_toy()
    cfg = ReconConfig(sigma=INFINITE, max_iters=200)
    states, _ = reconstruct_4d(data, epochs, cfg, optics, grid=grid)
    stack = states.stack()
    assert np.abs(stack - stack[0]).max() <= 1e-6
    _, eps = average_metrics(truth, states)
    assert eps < 0.05
    static = reconstruct_static(data, epochs, ReconConfig(sigma=20.0, max_iters=200), optics, grid=grid)
    assert static.flat().tobytes() == states.states[1].flat().tobytes()


def test_iteration_log(tmp_path):
    grid, truth, epochs, optics, data = static_toy()
    path = tmp_path / "log.csv"
    _, rs = reconstruct_4d(data, epochs, ReconConfig(sigma=20.0, max_iters=5), optics, grid=grid,
                           truth=truth, log_path=path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == (["iter", "cost", "grad_norm", "epsilon", "delta"]
                             + [f"epsilon_t{i}" for i in range(3)] + [f"delta_t{i}" for i in range(3)])
    assert [float(r["cost"]) for r in rows] == rs.cost_history
    assert float(rows[-1]["epsilon"]) < float(rows[0]["epsilon"])


def test_config_round_trip_and_validation():
    cfg = ReconConfig(sigma=INFINITE, max_iters=7)
    assert ReconConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ReconConfig.from_dict({"sigma": 5, "bogus": 1})
    with pytest.raises(ValueError):
        ReconConfig(lower_bound=5.0, upper_bound=1.0)
    with pytest.raises(ValueError):
        ReconConfig(init_value=400.0)
    with pytest.raises(ValueError):
        ReconConfig(method="newton")
