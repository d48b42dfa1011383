"""Entity salience estimation toolkit with search re-ranking support.

Submodules are imported explicitly (entsal.model, entsal.corpus, ...) so the
command-line entry point can configure numeric thread pools before any
numerics load.
"""

__version__ = "0.1.0"
