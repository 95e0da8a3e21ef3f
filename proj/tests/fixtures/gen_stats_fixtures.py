"""Offline reference values for the stats tests, produced with scipy.

tukey_wins.json: 200 random 4-model x 5-seed score matrices and the models
whose mean is not significantly below the best (scipy.stats.tukey_hsd,
alpha 0.05).
nemenyi_k4_n14.json, nemenyi_k10_n30.json: a dataset x model score table with the Friedman
statistic and p-value (scipy.stats.friedmanchisquare), the Nemenyi critical
difference (studentized range at df=inf over sqrt 2) and cliques found by
brute force over every subset of models.
"""
import itertools
import json
import math
import pathlib

import numpy as np
from scipy.stats import friedmanchisquare, rankdata, studentized_range, tukey_hsd

HERE = pathlib.Path(__file__).parent
rng = np.random.default_rng(20240601)

cases = []
for _ in range(200):
    spread = rng.choice([0.0, 0.3, 1.0, 3.0])
    means = rng.normal(0.0, spread, size=4)
    noise = rng.uniform(0.2, 2.0)
    scores = means[:, None] + rng.normal(0.0, noise, size=(4, 5))
    res = tukey_hsd(*scores)
    best = int(np.argmax(scores.mean(axis=1)))
    wins = [m for m in range(4) if m == best or res.pvalue[best, m] >= 0.05]
    cases.append({"scores": scores.tolist(), "wins": wins})
(HERE / "tukey_wins.json").write_text(json.dumps(cases, indent=1))


def nemenyi_fixture(k, n, quality):
    table = quality[None, :] + rng.normal(0.0, 0.6, size=(n, k))
    stat, p = friedmanchisquare(*table.T)
    # Rank 1 = highest score.
    ranks = np.array([rankdata(-row) for row in table])
    mean_ranks = ranks.mean(axis=0)
    cd = studentized_range.ppf(0.95, k, math.inf) / math.sqrt(2) * math.sqrt(k * (k + 1) / (6 * n))
    groups = []
    for size in range(k, 0, -1):
        for subset in itertools.combinations(range(k), size):
            r = mean_ranks[list(subset)]
            if r.max() - r.min() < cd and not any(set(subset) <= set(g) for g in groups):
                groups.append(list(subset))
    (HERE / f"nemenyi_k{k}_n{n}.json").write_text(json.dumps({
        "scores": table.tolist(),
        "ranks": ranks.tolist(),
        "mean_ranks": mean_ranks.tolist(),
        "chi2": float(stat),
        "p_value": float(p),
        "cd": cd,
        "cliques": sorted(sorted(g) for g in groups),
    }, indent=1))


nemenyi_fixture(4, 14, np.array([0.0, 0.4, 0.5, 1.2]))
nemenyi_fixture(10, 30, np.linspace(0.0, 1.5, 10))
