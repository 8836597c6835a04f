import numpy as np


def naive_subm(x, mask, weight, bias=None):
    """Loop oracle: out[p] = sum over active neighbours q of x[q] @ W[q - p]."""
    k = weight.shape[0]
    r = k // 2
    _, h, w = x.shape
    cout = weight.shape[3]
    rows = []
    for y in range(h):
        for xx in range(w):
            if not mask[y, xx]:
                continue
            acc = np.zeros(cout)
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xq = y + dy, xx + dx
                    if 0 <= yy < h and 0 <= xq < w and mask[yy, xq]:
                        acc += x[:, yy, xq].astype(np.float64) @ weight[dy + r, dx + r]
            if bias is not None:
                acc += bias
            rows.append(acc)
    return np.array(rows).reshape(-1, cout)


def naive_pair_count(mask, k=3):
    r = k // 2
    h, w = mask.shape
    n = 0
    for y, x in zip(*np.nonzero(mask)):
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                yy, xx = y + dy, x + dx
                n += 0 <= yy < h and 0 <= xx < w and bool(mask[yy, xx])
    return n


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in name or rep.when != "call" and outcome != "error":
                continue
            n = int(name.rsplit("_", 1)[-1])
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((n, f"criterion {n}: {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
