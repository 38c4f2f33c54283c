"""
saeipw.schema package.

Pydantic shapes of inputs, options, result tables and run configurations.
"""
