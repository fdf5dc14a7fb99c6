"""Graph-based deep reinforcement learning for radio resource allocation.

Subpackages:
  numcore   dense numeric kernel (FNNs, gradients, Adam, finite differences)
  hetgraph  heterogeneous graphs and matrix-state -> graph transforms
  pegnn     permutation-equivariant GNNs, readouts, batch norm, checkpoints
  ddpg      replay buffer, exploration, safe layer, training steps
  env_video predictive power allocation environment for video streaming
  env_d2d   device-to-device link scheduling environment and oracle
  harness   experiment runner, flop accounting, comparison tables
"""

__version__ = "0.1.0"
