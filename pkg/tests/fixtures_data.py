"""Shared hand-built fixtures."""

import numpy as np

from flowemb.data import ClassTable

QUARTILE_COUNTS = (40, 30, 20, 10)
# the second most frequent class (id 1) is always predicted wrong
WRONG_CLASS = 1


def quartile_fixture():
    """100 predictions over 4 classes; expected: accuracy 0.70, macro 0.75, quartiles (1, 0, 1, 1)."""
    table = ClassTable([f"d{c}.example" for c in range(4)], list(QUARTILE_COUNTS))
    truth = np.repeat(np.arange(4), QUARTILE_COUNTS)
    pred = truth.copy()
    pred[truth == WRONG_CLASS] = 3
    return pred, truth, table
