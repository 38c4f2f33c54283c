"""
app.py.

Command-line entry point of the saeipw toolkit.

This module hands the process arguments to the command dispatcher and exits
with its status code.

Usage
-----
Estimate area effects with analytic MSE:

    $ python app.py estimate --input population.csv --methods eblup,mq

Run a model-based study:

    $ python app.py simulate --scenario 1a --reps 200 --seed 42

Environment Variables
---------------------
- SAEIPW_LOG_LEVEL : str
    Optional. Logging level (e.g., INFO, DEBUG, ERROR).
- SAEIPW_LOG_DIR : str
    Optional. Directory of the rotating JSON log file.
- SAEIPW_WORKERS : int
    Optional. Default worker processes of the studies.
- SAEIPW_CLIP : float
    Optional. Default propensity clipping bound.
"""

import sys

from saeipw.cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
