"""
Exact paired comparisons with multiplicity control
==================================================

The analysis layer compares a treatment against a baseline on the same
tasks, so the unit of evidence is the discordant pair: b tasks only the
baseline solved, c tasks only the treatment solved.  The exact two-sided
binomial form works at any count, unlike the chi-square approximation.
"""

from memsearch.stats import bh_fdr, mcnemar_exact, significance_marker

# A spread of discordant counts, from tiny to one-sided.
rows = [
    (5, 2), (2, 3), (8, 2), (6, 0), (0, 1),
    (6, 2), (4, 1), (0, 3), (17, 3), (10, 2),
    (5, 4), (1, 1), (8, 6), (5, 3), (2, 2),
]

print("  b   c   p-value  marker")
pvalues = []
for b, c in rows:
    p = mcnemar_exact(b, c)
    pvalues.append(p)
    print(f"{b:3d} {c:3d}   {p:.3f}    {significance_marker(p) or '-'}")

# Every pair above was tested, so some small p-values are expected by
# chance alone.  Benjamini-Hochberg keeps the false discovery rate at q.
print()
for q in (0.05, 0.10):
    res = bh_fdr(pvalues, q)
    kept = [i for i, flag in enumerate(res.rejected) if flag]
    print(f"q={q}: {res.n_rejected} of {len(rows)} survive ->", end=" ")
    print(", ".join(f"(b={rows[i][0]}, c={rows[i][1]})" for i in kept) or "none")

# The step-up rule uses the largest k with p_(k) <= k*q/m, then flags
# every p at or below that threshold, so ties never straddle the cut.
print()
res = bh_fdr([0.02, 0.02, 1.0], 0.05)
print("tied p-values flagged together:", res.rejected)

# Degenerate input: no discordant pairs means no evidence either way.
print("b=0, c=0 ->", mcnemar_exact(0, 0))
