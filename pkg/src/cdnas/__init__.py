"""Evolutionary multi-objective search for cognitive-diagnosis architectures.

Diagnostic functions are expression trees over student, exercise and concept
embeddings.  :mod:`cdnas.evolve` searches them for validation AUC and an
interpretability score; :mod:`cdnas.training` trains a single candidate.
"""

__version__ = "0.1.0"
