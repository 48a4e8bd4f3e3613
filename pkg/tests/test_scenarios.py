import numpy as np
import pytest

from pac2bayes.scenarios import (
    SCENARIOS,
    UnknownScenario,
    generate,
    get_scenario,
    read_dataset,
    test_data as held_out,
    training_data,
)


def test_linear_perfect_residuals_centered():
    sc = get_scenario("linear_perfect")
    x, y = training_data(sc, 0)
    assert x.size == 100
    assert -0.3 <= np.mean(y - (1 + x)) <= 0.3
    assert np.all((x >= -3) & (x <= 3))


def test_flat_minima_size():
    x, y = training_data(get_scenario("flat_minima"), 0)
    assert x.size == y.size == 25


def test_train_and_test_streams_differ():
    sc = get_scenario("sin_perfect", n_train=50)
    xtr, _ = training_data(sc, 0)
    xte, _ = held_out(sc, 0, 50)
    assert not np.array_equal(xtr, xte)


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_true_density_finite(name):
    sc = get_scenario(name, n_train=200)
    x, y = training_data(sc, 1)
    lp = sc.true_log_density(x, y)
    assert lp.shape == x.shape and np.all(np.isfinite(lp))


def test_unknown_scenario():
    with pytest.raises(UnknownScenario):
        get_scenario("nope")


def test_generate_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    generate("linear_misspec", 3, a)
    generate("linear_misspec", 3, b)
    assert a.read_bytes() == b.read_bytes()
    x, y = read_dataset(a)
    ref = training_data(get_scenario("linear_misspec"), 3)
    assert np.array_equal(x, ref[0]) and np.array_equal(y, ref[1])
