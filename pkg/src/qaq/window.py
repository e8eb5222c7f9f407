from collections import deque

_SLACK = 1e-9


class ScoreWindow:
    """Last ``n`` attention scores of one token; predicts importance as their max.

    The window includes the current step's score, so a token is seeded with
    the score it receives on arrival.
    """

    def __init__(self, n, scores=()):
        if n < 1:
            raise ValueError("window size must be >= 1")
        self.n = n
        self._scores = deque(maxlen=n)
        for s in scores:
            self.push(s)

    def push(self, s):
        s = float(s)
        if not -_SLACK <= s <= 1.0 + _SLACK:
            raise ValueError(f"attention score {s} outside [0, 1]")
        self._scores.append(min(max(s, 0.0), 1.0))
        return self

    def predicted_score(self):
        if not self._scores:
            raise ValueError("token has no score history")
        return max(self._scores)

    @property
    def filled(self):
        return len(self._scores)

    @property
    def scores(self):
        return list(self._scores)

    @property
    def latest(self):
        if not self._scores:
            raise ValueError("token has no score history")
        return self._scores[-1]

    def __repr__(self):
        return f"ScoreWindow(n={self.n}, scores={self.scores})"
