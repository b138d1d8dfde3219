"""Historical-average reference for a dataset directory.

Usage: python3 ha_reference.py DATA_DIR [q] [p]

Prints test-split RMSE, MAE and window count of the per-node
(weekday, time-of-day) historical average fitted on every step touched by
the training windows.
"""
import json
import sys
from pathlib import Path

import numpy as np


def main():
    data = Path(sys.argv[1])
    q = int(sys.argv[2]) if len(sys.argv) > 2 else 12
    p = int(sys.argv[3]) if len(sys.argv) > 3 else 4
    meta = json.loads((data / "meta.json").read_text())
    n, s, d = meta["N"], meta["S"], meta["D"]
    x = np.fromfile(data / "activity.f32", dtype="<f4").astype(np.float64).reshape(s, n)

    count = s - q - p + 1
    n_train, n_val = count * 7 // 10, count // 10
    test = range(n_train + n_val, count)
    fit_end = n_train - 1 + q + p

    steps = np.arange(s)
    slot = ((meta["start_weekday"] + steps // d) % 7) * d + steps % d
    table = np.full((7 * d, n), np.nan)
    for k in np.unique(slot[:fit_end]):
        table[k] = x[:fit_end][slot[:fit_end] == k].mean(axis=0)
    fallback = x[:fit_end].mean(axis=0)

    err = []
    for w in test:
        for h in range(p):
            t = w + q + h
            pred = np.where(np.isnan(table[slot[t]]), fallback, table[slot[t]])
            err.append(x[t] - pred)
    err = np.concatenate(err)
    print(f"windows {len(test)} rmse {np.sqrt(np.mean(err ** 2)):.12f} mae {np.mean(np.abs(err)):.12f}")


if __name__ == "__main__":
    main()
