"""Independent scalar-loop references used by the tests.

Everything here works on plain Python floats and lists so that it shares no
code path with the tensor implementations under test.
"""

import math


def mse_oracle(pred, target):
    """pred/target: nested lists [batch][...flat elements...]."""
    total = 0.0
    for p_img, t_img in zip(pred, target):
        s = 0.0
        for p, t in zip(p_img, t_img):
            s += (p - t) * (p - t)
        total += s
    return total / len(pred)


def kl_oracle(mu, logvar):
    total = 0.0
    for m_row, l_row in zip(mu, logvar):
        s = 0.0
        for m, lv in zip(m_row, l_row):
            s += 0.5 * (math.exp(lv) + m * m - 1.0 - lv)
        total += s
    return total / len(mu)


def bce_oracle(probs, labels, eps=1e-7):
    total = 0.0
    for p_row, y_row in zip(probs, labels):
        s = 0.0
        for p, y in zip(p_row, y_row):
            p = min(max(p, eps), 1.0 - eps)
            s += y * math.log(p) + (1 - y) * math.log(1 - p)
        total += -s
    return total / len(probs)


def slippy_tile_oracle(lon, lat, z):
    """Tile indices via the asinh form of the Mercator ordinate."""
    n = 2 ** z
    x = math.floor((lon + 180.0) / 360.0 * n)
    y = math.floor((1.0 - math.asinh(math.tan(lat * math.pi / 180.0)) / math.pi) / 2.0 * n)
    return x, y
