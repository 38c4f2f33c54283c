"""
saeipw.estimation package.

IPW area estimators, their MSE, the bootstrap add-on and diagnostics.
"""
