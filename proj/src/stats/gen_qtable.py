"""Writes qtable.inc: upper 5% points of the studentized range distribution.

Source: scipy.stats.studentized_range.ppf(0.95, k, df). The Nemenyi row is the
df = inf column divided by sqrt(2).
"""
import math
import pathlib

from scipy.stats import studentized_range

KS = list(range(2, 31))
DFS = list(range(1, 31)) + [40, 60, 120]

rows = []
for k in KS:
    vals = [studentized_range.ppf(0.95, k, df) for df in DFS]
    vals.append(studentized_range.ppf(0.95, k, math.inf))
    rows.append(vals)

out = pathlib.Path(__file__).with_name("qtable.inc")
with out.open("w") as f:
    f.write("// Generated by gen_qtable.py; do not edit.\n")
    f.write("// q(0.95; k, df) for k = 2..30 (rows) and df = 1..30, 40, 60, 120, inf (columns).\n")
    f.write(f"constexpr int kTableDf[{len(DFS)}] = {{{', '.join(map(str, DFS))}}};\n")
    f.write(f"constexpr double kQ05[{len(KS)}][{len(DFS) + 1}] = {{\n")
    for k, vals in zip(KS, rows):
        f.write("    {" + ", ".join(f"{v:.12g}" for v in vals) + f"}},  // k={k}\n")
    f.write("};\n")
