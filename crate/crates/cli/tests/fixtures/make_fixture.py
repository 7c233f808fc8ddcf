"""Builds the baseline fixture and its EQM / EC-BC golden files.

The fixture is two years of daily data (epoch 2000-01-01) with two climate
model runs. Reference period: 2000 (days 0..365). Projection: 2001
(days 366..730). Corrections are computed per calendar month with a plain
reference implementation, independent of the Rust code.

    python3 make_fixture.py   # writes into this directory
"""

import bisect
import datetime
import math
import os
import random

HERE = os.path.dirname(os.path.abspath(__file__))
EPOCH = datetime.date(2000, 1, 1)
DAYS = 731
REF = (0, 365)
PROJ = (366, 730)
MAX_TRIM_SHARE = 0.05


def month(t):
    return (EPOCH + datetime.timedelta(days=t)).month


def fmt(x):
    """Shortest round-trip decimal without exponent, integers without '.0'."""
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    r = repr(x)
    if "e" in r or "E" in r:
        from decimal import Decimal
        r = format(Decimal(r), "f")
    return r


def series():
    rng = random.Random(20240601)
    obs, gcm = [], {0: [], 1: []}
    for t in range(DAYS):
        season = 10.0 * math.sin(2 * math.pi * (t - 100) / 365.25)
        obs.append(round(18.0 + season + rng.gauss(0, 2.5), 2))
        for r in gcm:
            gcm[r].append(round(16.5 + 1.2 * season + rng.gauss(0, 3.0) + 0.5 * r, 2))
    return obs, gcm


def by_month(ts, vs):
    out = {}
    for t, v in zip(ts, vs):
        out.setdefault(month(t), []).append(v)
    return out


def eqm(obs, run):
    ref_t = list(range(REF[0], REF[1] + 1))
    o = by_month(ref_t, [obs[t] for t in ref_t])
    g = by_month(ref_t, [run[t] for t in ref_t])
    out = []
    for t in range(PROJ[0], PROJ[1] + 1):
        m = month(t)
        os_, gs = sorted(o[m]), sorted(g[m])
        i = min(bisect.bisect_left(gs, run[t]), len(gs) - 1)
        out.append((t, os_[i]))
    return out


def ranks(vals):
    order = sorted(range(len(vals)), key=lambda i: (vals[i], i))
    r = [0] * len(vals)
    for k, i in enumerate(order):
        r[i] = k
    return r


def ecbc(obs, run):
    mapped = eqm(obs, run)
    values = [v for _, v in mapped]
    ref_t = list(range(REF[0], REF[1] + 1))
    tmpl = by_month(ref_t, [obs[t] for t in ref_t])
    pos = {}
    for i, (t, _) in enumerate(mapped):
        pos.setdefault(month(t), []).append(i)
    for m, p in pos.items():
        tm = tmpl[m]
        n = min(len(p), len(tm))
        surplus = max(len(p), len(tm)) - n
        assert surplus <= math.floor(MAX_TRIM_SHARE * max(len(p), len(tm)))
        srt = sorted(values[i] for i in p[:n])
        for i, r in zip(p[:n], ranks(tm[:n])):
            values[i] = srt[r]
    return [(t, v) for (t, _), v in zip(mapped, values)]


def write(name, header, rows):
    with open(os.path.join(HERE, name), "w", newline="\n") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def main():
    obs, gcm = series()
    write("obs.csv", "t,value", ([str(t), fmt(v)] for t, v in enumerate(obs)))
    write("gcm.csv", "t,run,value",
          ([str(t), str(r), fmt(gcm[r][t])] for r in gcm for t in range(DAYS)))
    for name, f in (("eqm", eqm), ("ecbc", ecbc)):
        rows = []
        for r in sorted(gcm):
            rows += [[str(r), str(t), fmt(v)] for t, v in f(obs, gcm[r])]
        write("golden_%s.csv" % name, "run,t,value", rows)


if __name__ == "__main__":
    main()
