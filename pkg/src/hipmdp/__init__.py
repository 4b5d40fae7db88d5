"""Hidden-parameter MDP laboratory.

Transfer learning across families of tasks whose dynamics vary with
low-dimensional hidden parameters: a Bayesian-neural-network transition
model conditioned on a learned latent embedding per task instance,
Double-DQN policies trained on model rollouts, and three benchmark
domains (2D navigation, acrobot, HIV treatment scheduling).
"""

__version__ = "0.1.0"
