"""
Learning the Kalman gain from the control loss
==============================================

The learned controller keeps the filter's predict/update structure and
the regulator, but a small recurrent network supplies the gain at each
step. The network is trained by differentiating the closed-loop cost
through the simulator. On a matched model it should end up close to the
classical controller, which is already optimal.

Training takes under a minute.
"""

import numpy as np

from lqgkit import Controller, QuadraticCost, TrainConfig, design_model, evaluate, to_db, train
from lqgkit.dynamics import trajectory_seeds
from lqgkit.gainnet import init_params
from lqgkit.training import grad_check, simulator_factory

model = design_model(0.0)
cost = QuadraticCost.identity(2, 1, 100)
x0 = np.array([10.0, 0.0])

# Before training, confirm the tape gradient agrees with finite differences.
print("gradient check, relative error:",
      grad_check(model, QuadraticCost.identity(2, 1, 20), init_params(2, 2), x0=x0))

cfg = TrainConfig(iterations=300)
report = train(model, simulator_factory(model, x0, cfg.x0_std), cost, cfg, x0)
curve = np.array(report.losses_db)
print(f"training loss: first 20 iterations {curve[:20].mean():.2f} dB, last 20 {curve[-20:].mean():.2f} dB")

seeds = trajectory_seeds(1, 1000)
for name, ctrl in [("model-based", Controller.model_based(model, cost, x0)),
                   ("learned", Controller.learned(model, cost, report.params, x0))]:
    losses, mses = evaluate(ctrl, model, cost, seeds)
    print(f"{name:12s} cost {to_db(losses.mean()):.2f} dB   state MSE {to_db(mses.mean()):.2f} dB")
