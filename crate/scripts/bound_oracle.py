"""Closed-form evaluation of the margin-bound Rademacher term on the 200-point
alpha grid, used to freeze regression constants in the Rust tests."""
import math
import sys


def rademacher(m, gamma, b, e, n_qubits, points=200, floor=1e-8):
    root = math.sqrt(m)
    dim = 2.0 ** n_qubits
    count = math.ceil(32.0 * m * b * b * e * e / (gamma * gamma))
    cover = math.sqrt(count * math.log(4.0 * dim * dim))
    best = (math.inf, 0.0)
    for i in range(1, points + 1):
        alpha = root * floor ** (1.0 - i / (points + 1))
        val = 4.0 * alpha / root + 12.0 / m * cover * math.log(root / alpha)
        best = min(best, (val, alpha))
    return best


if __name__ == "__main__":
    args = [float(a) for a in sys.argv[1:]] or [20, 0.1, 512, 2, 8]
    m, gamma, b, e, n = args
    val, alpha = rademacher(int(m), gamma, b, e, int(n))
    print(f"rademacher {val!r}\nalpha {alpha!r}")
