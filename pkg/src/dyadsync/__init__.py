"""Dyadic movement synchrony estimation from skeleton keypoints.

Two people, one score: the package turns paired 2D pose tracks into a
three-way synchrony call (synchronized / moderately synchronized /
unsynchronized) plus a continuous regression head.  The heavy lifting is
a small spatial-temporal attention network and a cross-similarity-matrix
branch, with classical baselines (dynamic time warping, per-joint
correlation, cross-recurrence) alongside for sanity.
"""

__version__ = "0.1.0"
