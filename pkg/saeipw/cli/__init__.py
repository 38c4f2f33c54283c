"""
__init__.py.

Command-line package of the toolkit.
"""
