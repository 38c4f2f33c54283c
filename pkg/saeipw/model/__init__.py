"""
saeipw.model package.

Population frames and the fitted outcome and propensity models.
"""
