"""Scope bare `pytest` runs to the package's own suite.

examples/ vendors test files from other projects whose dependencies are not
installed here; they are reading material, not part of this suite.
"""

collect_ignore = ["examples"]
