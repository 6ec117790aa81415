import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def loop_correlate_valid(x, k):
    """Nested-loop cross-correlation oracle for a single sample [C,H,W]."""
    co, ci, kh, kw = k.shape
    _, h, w = x.shape
    out = np.zeros((co, h - kh + 1, w - kw + 1))
    for o in range(co):
        for y in range(h - kh + 1):
            for xx in range(w - kw + 1):
                s = 0.0
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            s += x[c, y + i, xx + j] * k[o, c, i, j]
                out[o, y, xx] = s
    return out


def loop_deconv_full(x, k):
    """out[o,y,x] = sum_{c,i,j} x[c,y-i,x-j] k[o,c,i,j] over valid indices."""
    co, ci, kh, kw = k.shape
    _, h, w = x.shape
    out = np.zeros((co, h + kh - 1, w + kw - 1))
    for o in range(co):
        for y in range(h + kh - 1):
            for xx in range(w + kw - 1):
                s = 0.0
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            if 0 <= y - i < h and 0 <= xx - j < w:
                                s += x[c, y - i, xx - j] * k[o, c, i, j]
                out[o, y, xx] = s
    return out


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES = {}


class CriterionRecorder:
    """Records one PASS/FAIL line per acceptance criterion; failures re-raise."""

    def __init__(self, number, title):
        self.number, self.title, self.details = number, title, []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details + ([f"{exc_type.__name__}: {exc}"] if exc_type else []))
        line = f"ACCEPTANCE {self.number:>2} {status}  {self.title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return CriterionRecorder


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
