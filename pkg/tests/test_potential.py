import numpy as np
import pytest

from ipslab.errors import EigenIterationError, PotentialError
from ipslab.grid import build_grid
from ipslab.potential import (
    Ball,
    BoxShape,
    ObstacleSpec,
    Shape,
    ball_obstacle,
    box_obstacle,
    check_wellposed,
    distance_to_obstacle_boundary,
    empty_obstacle,
    obstacle_value,
    sample_potential,
)


def unit_grid(n=12):
    return build_grid((1.0, 1.0, 1.0), (n, n, n))


def test_ball_sampling_constant_amplitude():
    g = unit_grid()
    obs = ball_obstacle((0.5, 0.5, 0.5), 0.2, 5.0)
    pot = sample_potential(g, obs)
    X, Y, Z = g.coords
    inside = (X - 0.5) ** 2 + (Y - 0.5) ** 2 + (Z - 0.5) ** 2 <= 0.2**2
    assert np.all(pot.V.values[inside] == 5.0)
    assert np.all(pot.V.values[~inside] == 0.0)
    assert pot.jump_floor == 5.0
    assert np.array_equal(pot.support_mask, inside)


def test_empty_obstacle_gives_zero_potential():
    g = unit_grid()
    pot = sample_potential(g, empty_obstacle())
    assert pot.is_zero
    assert np.all(pot.V.values == 0.0)
    assert pot.jump_floor == 0.0


def test_two_signed_balls():
    g = unit_grid(15)
    obs = ObstacleSpec(
        (
            Shape(Ball((0.3, 0.3, 0.3), 0.12), 1, 5.0),
            Shape(Ball((0.7, 0.7, 0.7), 0.12), -1, 5.0),
        )
    )
    pot = sample_potential(g, obs)
    vals = set(np.unique(pot.V.values))
    assert vals == {-5.0, 0.0, 5.0}
    assert obs.uniform_sign() is None


def test_opposite_sign_overlap_rejected():
    with pytest.raises(PotentialError):
        ObstacleSpec(
            (
                Shape(Ball((0.4, 0.5, 0.5), 0.15), 1, 5.0),
                Shape(Ball((0.6, 0.5, 0.5), 0.15), -1, 3.0),
            )
        )
    # same-sign overlap is allowed
    ObstacleSpec(
        (
            Shape(Ball((0.4, 0.5, 0.5), 0.15), 1, 5.0),
            Shape(Ball((0.6, 0.5, 0.5), 0.15), 1, 3.0),
        )
    )


def test_shape_touching_wall_rejected():
    g = unit_grid()
    with pytest.raises(PotentialError):
        sample_potential(g, ball_obstacle((0.5, 0.5, 0.9), 0.2, 5.0))
    with pytest.raises(PotentialError):
        sample_potential(g, box_obstacle((0.2, 0.2, 0.2), (1.0, 0.6, 0.6), 2.0))


def test_signed_distance_primitives():
    obs = ball_obstacle((0.5, 0.5, 0.5), 0.2, 5.0)
    assert distance_to_obstacle_boundary(obs, (0.5, 0.5, 0.8)) == pytest.approx(0.1)
    assert distance_to_obstacle_boundary(obs, (0.5, 0.5, 0.5)) == pytest.approx(-0.2)
    two = ObstacleSpec(
        (
            Shape(Ball((0.3, 0.5, 0.5), 0.1), 1, 5.0),
            Shape(Ball((0.7, 0.5, 0.5), 0.1), 1, 5.0),
        )
    )
    assert distance_to_obstacle_boundary(two, (0.5, 0.5, 0.5)) == pytest.approx(0.1)
    b = box_obstacle((0.3, 0.3, 0.3), (0.7, 0.7, 0.7), 1.0)
    assert distance_to_obstacle_boundary(b, (0.5, 0.5, 0.5)) == pytest.approx(-0.2)
    assert distance_to_obstacle_boundary(b, (0.9, 0.5, 0.5)) == pytest.approx(0.2)
    # outside a box corner the distance is euclidean to the corner
    d = distance_to_obstacle_boundary(b, (0.8, 0.8, 0.8))
    assert d == pytest.approx(np.sqrt(3 * 0.1**2))
    assert distance_to_obstacle_boundary(empty_obstacle(), (0.5, 0.5, 0.5)) == np.inf


def test_jump_floor_in_collar_with_variation():
    collar = 0.05
    obs = ObstacleSpec(
        (Shape(Ball((0.5, 0.5, 0.5), 0.25), 1, 5.0, variation=-2.0),),
        collar=collar,
    )
    g = unit_grid(24)
    pot = sample_potential(g, obs)
    X, Y, Z = g.coords
    sd = np.sqrt((X - 0.5) ** 2 + (Y - 0.5) ** 2 + (Z - 0.5) ** 2) - 0.25
    collar_nodes = (sd <= 0) & (sd >= -collar)
    assert np.all(pot.V.values[collar_nodes] >= 5.0 - 1e-12)
    deep = sd <= -2.5 * collar
    assert np.any(pot.V.values[deep] < 5.0)
    # never drops to the flipped sign
    assert np.all(pot.V.values[sd <= 0] > 0.0)


def test_variation_flipping_sign_rejected():
    with pytest.raises(PotentialError):
        Shape(Ball((0.5, 0.5, 0.5), 0.2), 1, 2.0, variation=-2.5)


def test_obstacle_value_pointwise():
    obs = ball_obstacle((0.5, 0.5, 0.5), 0.2, -3.0)
    assert obstacle_value(obs, (0.5, 0.5, 0.5)) == -3.0
    assert obstacle_value(obs, (0.9, 0.9, 0.9)) == 0.0
    assert obs.uniform_sign() == -1


def test_wellposed_zero_potential_oracle():
    g = unit_grid(12)
    rep = check_wellposed(g, None)
    h = g.h[0]
    discrete = 3 * (4 / h**2) * np.sin(np.pi * h / 2) ** 2
    assert rep.lambda_min == pytest.approx(discrete, rel=1e-8)
    # continuum value 3 pi^2 within O(h^2)
    assert rep.lambda_min == pytest.approx(3 * np.pi**2, rel=0.02)
    assert not rep.flagged


def test_wellposed_monotone_shift_bracket():
    g = unit_grid(10)
    base = check_wellposed(g, None).lambda_min
    shifted = check_wellposed(g, 5.0).lambda_min
    assert shifted - base <= 5.0 + 1e-6
    assert shifted - base >= -1e-6


def test_wellposed_near_singular_flag():
    g = unit_grid(8)
    h = g.h[0]
    discrete = 3 * (4 / h**2) * np.sin(np.pi * h / 2) ** 2
    rep = check_wellposed(g, -discrete + 1e-3)
    assert rep.flagged
    assert rep.lambda_min == pytest.approx(1e-3, rel=1e-4)
    # localized obstacle potential also goes through the same path
    pot = sample_potential(g, ball_obstacle((0.5, 0.5, 0.5), 0.2, 5.0))
    rep2 = check_wellposed(g, pot)
    assert not rep2.flagged
    assert rep2.lambda_min > check_wellposed(g, None).lambda_min - 1e-6


def test_wellposed_iteration_failure_is_distinct():
    g = unit_grid(8)
    with pytest.raises(EigenIterationError):
        check_wellposed(g, None, max_iter=1)


def test_degenerate_geometry_rejected():
    with pytest.raises(PotentialError):
        Ball((0.5, 0.5, 0.5), -0.1)
    with pytest.raises(PotentialError):
        BoxShape((0.5, 0.2, 0.2), (0.4, 0.6, 0.6))
    with pytest.raises(PotentialError):
        Shape(Ball((0.5, 0.5, 0.5), 0.1), 2, 1.0)
