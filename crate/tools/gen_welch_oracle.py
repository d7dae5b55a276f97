"""Freeze Welch t-test reference values computed with mpmath at 60 digits.

Writes crates/core/tests/fixtures/welch_oracle.json. The p-value is evaluated
by direct numerical quadrature of the Student-t density, which does not share
any code path with the continued-fraction incomplete beta used by the crate.
"""
import json
import random
from pathlib import Path

import mpmath as mp

mp.mp.dps = 60


def welch(a, b):
    a = [mp.mpf(x) for x in a]
    b = [mp.mpf(x) for x in b]
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    t = (ma - mb) / mp.sqrt(se2)
    dof = se2 ** 2 / (sa ** 2 / (na - 1) + sb ** 2 / (nb - 1))
    nu = dof
    c = mp.gamma((nu + 1) / 2) / (mp.sqrt(nu * mp.pi) * mp.gamma(nu / 2))
    tail = mp.quad(lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2), [abs(t), mp.inf])
    p = 2 * tail
    return t, dof, p


def main():
    rng = random.Random(20231107)
    cases = [([1, 2, 3, 4], [2, 3, 4, 5])]
    while len(cases) < 100:
        na = rng.randint(2, 40)
        nb = rng.randint(2, 40)
        mu = rng.uniform(-50, 300)
        shift = rng.uniform(-3, 3) * rng.choice([0.1, 1, 10, 40])
        sda = rng.uniform(0.1, 90)
        sdb = rng.uniform(0.1, 90)
        a = [round(rng.gauss(mu, sda), 3) for _ in range(na)]
        b = [round(rng.gauss(mu + shift, sdb), 3) for _ in range(nb)]
        if len(cases) % 17 == 0:
            b = [float(round(mu))] * nb  # one zero-variance sample
        cases.append((a, b))
    out = []
    for a, b in cases:
        t, dof, p = welch(a, b)
        out.append({
            "a": a,
            "b": b,
            "t": float(t),
            "dof": float(dof),
            "p": float(p),
        })
    path = Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/welch_oracle.json"
    path.write_text(json.dumps(out, indent=1) + "\n")
    print(f"wrote {len(out)} cases to {path}")
    print(out[0])


if __name__ == "__main__":
    main()
