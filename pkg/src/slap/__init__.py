"""Language-conditioned point-cloud manipulation policy.

Two-part pipeline: an interaction prediction module scores every token of a
voxel-downsampled scene to pick the point the robot should act on, and a
relative action module regresses approach/interaction/departure keyframes
around it. Synthetic tabletop scenes stand in for robot demonstrations.
"""

__version__ = "0.1.0"
