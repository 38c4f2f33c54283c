"""
saeipw package.

Area-level average treatment effects for unplanned domains by inverse
propensity weighting combined with small area models.

The package provides the application factory `create_app()`, which returns
the command-line parser, and the version string recorded in every output.

Modules
-------
- model : Population frames and the outcome and propensity models.
- estimation : IPW estimators, analytic MSE, bootstrap and diagnostics.
- simulation : Model-based and design-based Monte Carlo studies.
- cli : Command-line commands and output writers.
- logger : JSON structured logging.

Usage
-----
    >>> from saeipw import create_app
    >>> parser = create_app()

Run using:
    $ python app.py estimate --input population.csv
"""

import argparse

__version__ = "1.0.0"


def create_app() -> argparse.ArgumentParser:
    """
    Create the command-line parser.

    Returns
    -------
    argparse.ArgumentParser
        Parser with the estimate, simulate, diagnose and bootstrap commands.
    """
    from saeipw.cli.commands import build_parser

    return build_parser()
