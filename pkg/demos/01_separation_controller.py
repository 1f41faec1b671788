"""
The classical controller on a double integrator
================================================

A Kalman filter feeds its state estimate to a finite-horizon regulator.
With a matched model this pairing is optimal, and its expected cost has a
closed form we can check against simulation.
"""

import numpy as np

from lqgkit import Controller, QuadraticCost, design_model, evaluate, to_db
from lqgkit.dynamics import trajectory_seeds
from lqgkit.estimation import gain_schedule

# position/velocity state, force input, both states observed; 0 dB noise
model = design_model(0.0)
print("F =\n", model.F, "\nG =\n", model.G)

cost = QuadraticCost.identity(m=2, q=1, horizon=100)
x0 = np.array([10.0, 0.0])
ctrl = Controller.model_based(model, cost, x0)

# The regulator gains come from a backward Riccati sweep and settle quickly
# to their steady-state value away from the horizon end.
print("first gain", ctrl.schedule.gains[0], "last gain", ctrl.schedule.gains[-1])

# Expected cost: x0' P0 x0, plus process noise cost-to-go, plus the price of
# acting on estimates instead of true states.
_, covs = gain_schedule(model, ctrl.prior_cov, cost.horizon)
covs = [np.zeros((2, 2))] + covs[1:]
expected = x0 @ ctrl.schedule.riccati[0] @ x0
for t in range(cost.horizon):
    P1, L = ctrl.schedule.riccati[t + 1], ctrl.schedule.gains[t]
    expected += np.trace(P1 @ model.W)
    expected += np.trace(covs[t] @ L.T @ (cost.R_control + model.G.T @ P1 @ model.G) @ L)

losses, mses = evaluate(ctrl, model, cost, trajectory_seeds(0, 2000))
print(f"expected cost  {to_db(expected):.2f} dB")
print(f"simulated cost {to_db(losses.mean()):.2f} dB over {losses.size} runs")
print(f"state MSE      {to_db(mses.mean()):.2f} dB")
