"""Results of the acceptance checks, printed at the end of the session."""

RESULTS = {}


def record(ac, ok, detail):
    RESULTS[ac] = (ok, detail)
