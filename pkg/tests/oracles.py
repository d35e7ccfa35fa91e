"""Independent high-precision reference values for the group losses."""

import mpmath as mp

mp.mp.dps = 50


def _lse(xs):
    return mp.log(mp.fsum(mp.e ** x for x in xs))


def _nls(z):
    # -log sigma(z)
    return mp.log(1 + mp.e ** (-z))


def phi_mp(kind, uP, uN):
    uP = [mp.mpf(x) for x in uP]
    uN = [mp.mpf(x) for x in uN]
    if kind == "DPO":
        return _nls(uP[0] - uN[0])
    if kind == "Margin":
        return _nls(mp.fsum(uP) / len(uP) - mp.fsum(uN) / len(uN))
    if kind == "MPO":
        return _lse(uP + uN) - _lse(uP)
    if kind == "Softmax":
        ln = _lse(uN)
        return mp.fsum(_nls(p - ln) for p in uP) / len(uP)
    if kind == "AllPairs":
        return mp.fsum(_nls(p - n) for p in uP for n in uN) / (len(uP) * len(uN))
    raise ValueError(kind)


def grad_mp(kind, uP, uN):
    """Gradient by high-precision central differences (h = 1e-20)."""
    h = mp.mpf("1e-20")
    out = []
    for side in (0, 1):
        vec = list(uP) if side == 0 else list(uN)
        g = []
        for i in range(len(vec)):
            up, dn = list(vec), list(vec)
            up[i] = mp.mpf(vec[i]) + h
            dn[i] = mp.mpf(vec[i]) - h
            a = phi_mp(kind, up, uN) if side == 0 else phi_mp(kind, uP, up)
            b = phi_mp(kind, dn, uN) if side == 0 else phi_mp(kind, uP, dn)
            g.append(float((a - b) / (2 * h)))
        out.append(g)
    return out
