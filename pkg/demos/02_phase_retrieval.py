"""Majorization-minimization for magnitude-only least squares.

Minimize 0.5 * sum (|L x| - y)^2 over complex x.  Each step replaces the
unknown phases by those of the current prediction and solves a linear least
squares problem, so the objective can only go down.  Several random starts
are compared against the planted solution.

    python3 demos/02_phase_retrieval.py
"""

import numpy as np

from wipr.phase_retrieval import PrProblem, mm_solve

rng = np.random.default_rng(3)
m, n = 24, 6
L = rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))
x_true = rng.standard_normal(n) + 1j * rng.standard_normal(n)
problem = PrProblem.from_matrix(L, L @ x_true)

for start in range(5):
    x0 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    state = mm_solve(problem, x0, max_iters=500, tol=1e-14)
    # the solution is only defined up to a global phase
    phase = np.vdot(state.x, x_true)
    aligned = state.x * phase / abs(phase)
    err = np.linalg.norm(aligned - x_true) / np.linalg.norm(x_true)
    rises = int(np.sum(np.diff(state.history) > 0))
    print(f"start {start}: {state.iteration:3d} steps, objective {state.history[0]:.3e} -> "
          f"{state.objective:.3e}, increases {rises}, error up to phase {err:.1e}")
