import pytest
from hypothesis import given
from hypothesis import strategies as st

from qaq.window import ScoreWindow

scores = st.lists(st.floats(0, 1), min_size=1, max_size=30)


def test_push_below_capacity():
    assert ScoreWindow(3, [0.1, 0.9]).push(0.05).scores == [0.1, 0.9, 0.05]


def test_evicts_oldest():
    w = ScoreWindow(3, [0.9, 0.05, 0.1]).push(0.02)
    assert w.scores == [0.05, 0.1, 0.02]
    assert w.predicted_score() == 0.1


def test_prediction_is_max():
    assert ScoreWindow(3, [0.1, 0.9, 0.05]).predicted_score() == 0.9
    assert ScoreWindow(3, [0.7]).predicted_score() == 0.7


def test_size_one_is_current_score():
    w = ScoreWindow(1)
    for s in (0.4, 0.9, 0.1):
        w.push(s)
        assert w.predicted_score() == s


def test_empty_window():
    with pytest.raises(ValueError, match="token has no score history"):
        ScoreWindow(4).predicted_score()


def test_range_check():
    w = ScoreWindow(2)
    with pytest.raises(ValueError):
        w.push(1.1)
    with pytest.raises(ValueError):
        w.push(-0.01)
    w.push(1.0 + 5e-10)
    assert w.latest == 1.0


def test_invalid_size():
    with pytest.raises(ValueError):
        ScoreWindow(0)


@given(scores, st.integers(1, 10))
def test_prediction_not_below_latest(history, n):
    w = ScoreWindow(n, history)
    assert w.predicted_score() >= w.latest
    assert w.filled == min(n, len(history))


@given(scores, st.integers(1, 10), st.integers(0, 10))
def test_monotone_in_size(history, n, extra):
    assert ScoreWindow(n + extra, history).predicted_score() >= ScoreWindow(n, history).predicted_score()
