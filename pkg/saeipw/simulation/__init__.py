"""
saeipw.simulation package.

Monte Carlo studies comparing the estimators.
"""
