"""Regenerate eh_dataset.csv: logistic PCE-vs-dBm rectifier curves with a hard output cap."""
import math

QS = [1, 2, 4, 8, 16]
FLOOR_W = 1e-7


def params(q):
    t = math.log2(q) / 4.0
    eta_max = 0.6 + (0.5 - 0.6) * t
    half = -12.0 + (-22.0 + 12.0) * t
    width = 3.0 + (3.5 - 3.0) * t
    cap = 6.0 + (0.0 - 6.0) * t
    return eta_max, half, width, cap


def main():
    print("q,p_in_dbm,p_eh_dbm")
    for q in QS:
        eta_max, half, width, cap = params(q)
        for p in range(-35, 26):
            eta = eta_max / (1.0 + math.exp(-(p - half) / width))
            out = min(10 ** (p / 10) * eta, 10 ** (cap / 10)) * 1e-3
            if out < FLOOR_W:
                print(f"{q},{p},-inf")
            else:
                print(f"{q},{p},{10 * math.log10(out * 1e3):.4f}")


if __name__ == "__main__":
    main()
