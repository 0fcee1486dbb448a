"""riskstack: a risk-bounded driving stack with a closed-loop simulator.

Layers, bottom to top: kinematics and Gaussian utilities (core), simulated
sensing and tracking (scene), learned probabilistic flow tubes (pft),
Bayesian maneuver recognition (intent), ego maneuver generation (maneuvers),
collision-probability kernels (risk), temporal-network scheduling (stn),
chance-constrained policy search (planner), and the scenario simulator
(scenario, simulate) with a command-line front end (cli).
"""

__version__ = "0.1.0"
