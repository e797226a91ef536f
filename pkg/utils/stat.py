"""
Statistics-related utility functions.
"""
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.stats


def running_minimum(x: Sequence[float]) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(x, dtype=np.float64))


def relative_error(a: np.ndarray, b: np.ndarray, eps=1e-12) -> float:
    """ |a - b| / max(|a| + |b|, eps) (euclidean norms of the flattened arrays). """
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), eps))


def wilcoxon_test(x: pd.DataFrame, y: pd.DataFrame, improved_if="y>x", p_value_th=0.05):
    """ Computes the wilcoxon test for DataFrames of paired samples, for each column of the x dataframe
     vs. each col of the y dataframe.

    :returns: a Pandas Series containing the test's p-value for each column, and a Pandas Series indicating whether
        y features are improved compared to x (if using default arguments)
    """
    p_values = dict()
    if improved_if == "y<x":
        alternative = "greater"  # d = x - y "tends to be > 0"  ===> H0 : "x < y" (we'll try to reject that)
    elif improved_if == "y>x":
        alternative = "less"
    else:
        raise NotImplementedError()
    for col in x:
        d = x[col].values - y[col].values
        if np.all(d == 0.0):  # scipy cannot rank all-zero differences
            p_values[col] = 1.0
            continue
        test_result = scipy.stats.wilcoxon(x[col].values, y[col].values, alternative=alternative)
        p_values[col] = test_result.pvalue
    p_values = pd.Series(p_values, dtype=np.float64)
    return p_values, p_values < p_value_th
