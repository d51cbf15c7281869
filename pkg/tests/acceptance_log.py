"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS = []


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok
