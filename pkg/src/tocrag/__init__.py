"""Retrieval-augmented chat that retrieves by table-of-contents heading selection.

The package bundles the heading-selection pipeline, the vector-chunk baseline
it is compared against, an embedding-representativeness audit toolkit, a
statistical evaluation harness, and a CLI plus HTTP service front end.
"""

__version__ = "0.1.0"
