"""Helpers shared by several test modules."""
import numpy as np

from dcno.autodiff import ParameterStore

HE_GAIN = np.sqrt(6.0)


def signal_preserving(store: ParameterStore) -> ParameterStore:
    """Copy of ``store`` with every real weight matrix and kernel scaled by sqrt(6).

    The default ±1/sqrt(fan_in) draws shrink activations by roughly 12x per
    GELU layer, so after a dozen layers many parameters move the loss by less
    than one ulp over a finite-difference step. Scaling to the He-uniform bound
    keeps activations O(1) so central differences can resolve every coordinate.
    """
    out = store.copy()
    for name in out.names():
        if not name.endswith((".b", ".R")):
            out[name] = out[name] * HE_GAIN
    return out


def squared_error_program(model, x, y):
    def program(t, ids):
        out = model.forward(t, ids, x)
        return t.sum(t.square(t.add(out, t.constant(-y))))
    return program


ACCEPTANCE_LINES = []


def report(criterion: str, ok: bool, detail: str) -> bool:
    """Record and print one acceptance line; returns ``ok`` for the caller's assert."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def report_not_run(criterion: str, detail: str) -> None:
    line = f"criterion {criterion}: NOT RUN ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
