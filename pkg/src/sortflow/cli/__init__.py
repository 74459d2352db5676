"""Command-line surface for sortflow.

Exposes the ``sortflow`` verbs (validate-layout, solve, decompose,
simulate, report) and the pipeline that backs them.
"""

__all__: list[str] = []
