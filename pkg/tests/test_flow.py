import numpy as np
import pytest

from sidemc.flow import Model, NoiseBatch, Simulator, invert_flow, nearest_seed, seed_mesh, simulate_flow
from sidemc.jumpmaps import invert_jump_map
from sidemc.noise import OBSERVED, JumpMeasureSpec, TimeGrid, sample_noise
from sidemc.problem import CoefficientSet, Field, ProblemSpec

X0 = np.linspace(-2, 2, 9)


def _field(fn, shape=(1,)):
    return Field(lambda t, X, z=None: fn(t, X, z), shape)


def _jump_spec(alpha=1.5, atoms=((1.0, 2.0, "D"), (0.5, 1.0, "E")), T=1.0):
    co = CoefficientSet.build(
        alpha=alpha,
        b=_field(lambda t, X, z: 0.5 * np.cos(X)),
        sigma1=_field(lambda t, X, z: (0.3 + 0.1 * np.sin(X))[..., None], (1, 1)),
        H1=_field(lambda t, X, z: 0.3 * np.sin(X) * np.asarray(z)[..., None]),
    )
    return ProblemSpec(co, (JumpMeasureSpec(atoms=atoms),), T, phi=0.0)


def test_constant_drift_translates_backwards():
    spec = ProblemSpec(CoefficientSet.build(alpha=1.0, b=1.0), (), 1.0, phi=0.0)
    noise = sample_noise(TimeGrid.uniform(1.0, 10), spec.measures, (1, 1), 0)
    fl = simulate_flow(spec, noise, X0, with_jacobian=True)
    np.testing.assert_allclose(fl.trajectory[-1][:, 0], X0 - 1.0, atol=1e-14)
    np.testing.assert_allclose(fl.jacobian[-1][:, 0, 0], 1.0)


def test_linear_drift_euler_product_and_jacobian():
    spec = ProblemSpec(CoefficientSet.build(alpha=1.0, b=_field(lambda t, X, z: X)), (), 1.0, phi=0.0)
    n = 1000
    noise = sample_noise(TimeGrid.uniform(1.0, n), spec.measures, (1, 1), 0)
    fl = simulate_flow(spec, noise, X0[X0 != 0], with_jacobian=True)
    end = fl.trajectory[-1][:, 0]
    np.testing.assert_allclose(end, X0[X0 != 0] * (1 - 1.0 / n) ** n, rtol=1e-12)
    np.testing.assert_allclose(end, X0[X0 != 0] * np.exp(-1.0), rtol=1e-3)
    np.testing.assert_allclose(fl.jacobian[-1][:, 0, 0], (1 - 1.0 / n) ** n, rtol=1e-6)


def test_additive_noise_displacement_is_wiener_sum():
    spec = ProblemSpec(CoefficientSet.build(alpha=2.0, sigma2=1.0, channels=(1, 1)), (), 0.5, phi=0.0)
    noise = sample_noise(TimeGrid.uniform(0.5, 20), spec.measures, (1, 1), 3)
    fl = simulate_flow(spec, noise, X0)
    np.testing.assert_allclose(fl.trajectory[-1][:, 0] - X0, noise.latent_wiener.increments.sum(), atol=1e-13)


def test_jacobian_matches_finite_difference_of_flow():
    spec = _jump_spec()
    noise = sample_noise(TimeGrid.uniform(1.0, 200), spec.measures, (1, 1), 7)
    fl = simulate_flow(spec, noise, X0, with_jacobian=True)
    up = simulate_flow(spec, noise, X0 + 1e-6).trajectory[-1][:, 0]
    dn = simulate_flow(spec, noise, X0 - 1e-6).trajectory[-1][:, 0]
    np.testing.assert_allclose(fl.jacobian[-1][:, 0, 0], (up - dn) / 2e-6, rtol=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_one_dimensional_flow_preserves_order(seed):
    spec = _jump_spec()
    noise = sample_noise(TimeGrid.uniform(1.0, 100), spec.measures, (1, 1), seed)
    fl = simulate_flow(spec, noise, np.linspace(-4, 4, 81))
    assert np.all(np.diff(fl.trajectory[:, :, 0], axis=1) > 0)


def test_flow_inversion_round_trip():
    spec = _jump_spec()
    noise = sample_noise(TimeGrid.uniform(1.0, 100), spec.measures, (1, 1), 11)
    pts = np.linspace(-3, 3, 13)
    fl = simulate_flow(spec, noise, seed_mesh(pts[:, None]))
    target = simulate_flow(spec, noise, pts).trajectory[-1]
    inv = invert_flow(fl, 1.0, target, tol=1e-12)
    np.testing.assert_allclose(inv.y[:, 0], pts, atol=1e-10)
    assert inv.iterations <= 10


def test_nearest_seed_sorted_search_matches_brute_force():
    seeds = np.linspace(-1, 1, 7)[:, None]
    images = seeds**3
    targets = np.random.default_rng(0).uniform(-1.2, 1.2, (1, 20, 1))
    got = nearest_seed(seeds, images[None], targets)
    brute = seeds[np.argmin(np.abs(images[:, 0][None, :] - targets[0]), axis=1)]
    np.testing.assert_array_equal(np.asarray(got).reshape(-1), brute[:, 0])


def test_interlacing_matches_unsplit_simulation():
    # run (a): every event inside the simulator; run (b): E events removed from
    # the batch and applied by hand between continuous pieces
    spec = _jump_spec(atoms=((1.0, 2.0, "D"), (0.5, 6.0, "E")))
    grid = TimeGrid.uniform(1.0, 50)
    noise = sample_noise(grid, spec.measures, (1, 1), 5)
    model = Model.from_spec(spec)
    P = np.linspace(-2, 2, 11)[:, None]
    full = Simulator(model, NoiseBatch.from_realization(noise)).run(P, 0.0, 1.0).X[0]

    jumps = noise.observed_jumps
    large = jumps.tags == 1
    assert large.sum() >= 2
    sim = Simulator(model, NoiseBatch.from_realization(noise, keep_observed=~large))
    X, t = P, 0.0
    for s, z in zip(jumps.times[large], jumps.marks[large]):
        X = sim.run(X, t, s).X[0]
        X = invert_jump_map(model.handle(0), float(s), X, float(z), model.tol)
        t = s
    X = sim.run(X, t, 1.0).X[0]
    assert np.max(np.abs(X - full)) <= 1e-12


def test_replicas_in_one_batch_match_separate_runs():
    spec = _jump_spec()
    grid = TimeGrid.uniform(1.0, 40)
    model = Model.from_spec(spec)
    noises = [sample_noise(grid, spec.measures, (1, 1), s) for s in (1, 2, 3)]
    from sidemc.flow import _realization_events

    batch = NoiseBatch.assemble(grid, np.stack([n.observed_wiener.increments for n in noises]),
                                np.stack([n.latent_wiener.increments for n in noises]),
                                [_realization_events(n) for n in noises])
    joint = Simulator(model, batch).run(X0[:, None], 0.0, 1.0).X
    for r, n in enumerate(noises):
        alone = Simulator(model, NoiseBatch.from_realization(n)).run(X0[:, None], 0.0, 1.0).X[0]
        np.testing.assert_allclose(joint[r], alone, atol=1e-14)
    assert OBSERVED == 1
