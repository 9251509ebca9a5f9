"""Supervised Bellman validation for offline model selection in RL.

Modules:

* :mod:`sbv.data`        datasets, splits, Q-functions, policies and seeding
* :mod:`sbv.tabular`     exact tabular MDP oracles
* :mod:`sbv.toy`         the four-dimensional toy MDP and its MSBE oracle
* :mod:`sbv.regression`  ridge, KNN, forest and per-cell regressors
* :mod:`sbv.candidates`  FQI and other candidate Q-functions
* :mod:`sbv.selectors`   SBV, EMSBE, WIS and FQE scoring
* :mod:`sbv.harness`     ground truth, ranking metrics and experiments
* :mod:`sbv.verify`      exact checks of the error bounds and oracles
* :mod:`sbv.cli`         the ``sbv`` command
"""

__version__ = "0.1.0"
