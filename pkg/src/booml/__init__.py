"""Multi-objective recommender training with group-personalized trade-off weights.

The package trains embedding recommenders against accuracy, diversity and
fairness objectives at once.  Per-group weights for the diversity and fairness
terms are searched by Gaussian-process Bayesian optimization; each candidate
weight vector is scored by a short meta-learning training run whose outer
gradients are de-conflicted by projection before the update.
"""

__version__ = "0.1.0"
