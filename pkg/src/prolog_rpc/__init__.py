"""Remote predicate call protocol for Prolog.

Five pieces, layered bottom up: terms (wire codec), engine (resolution
and the clause store), protocol (request/response vocabulary and the
session state machine), server (TCP host), client (library and REPL).
"""

__version__ = "0.1.0"
