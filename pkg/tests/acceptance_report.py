"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

LINES = []


def report(number, title, ok, detail, status=None):
    status = status or ("PASS" if ok else "FAIL")
    line = f"[{status}] criterion {number:>2} {title}: {detail}"
    LINES.append((number, line))
    print(line)
    return ok
