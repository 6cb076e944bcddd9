"""flint: joint training of an image classifier with a concept-based interpreter.

A predictor network is trained together with an interpreter branch that reads
the predictor's hidden layers through a small dictionary of non-negative
attribute functions.  The package provides local/global relevance analysis,
attribute visualization, evaluation metrics, and a command-line interface.
"""

__version__ = "0.1.0"
