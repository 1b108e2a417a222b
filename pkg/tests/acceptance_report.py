"""Collects one pass/fail line per acceptance criterion."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    RESULTS[n] = (bool(ok), detail)
    print(line(n))
    return ok


def line(n: int) -> str:
    ok, detail = RESULTS[n]
    return f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
