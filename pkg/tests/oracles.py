"""Independent reference implementations used to check the library.

Everything here is written as plain Python loops over floats, with no
numpy vectorization and no imports from the package under test, so a
bug in the library cannot hide in a shared code path. Keep it slow and
obvious.
"""

from __future__ import annotations

import math


def oracle_kth_largest(values, alpha):
    """alpha-th largest element under (descending value, ascending index)."""
    order = sorted(range(len(values)), key=lambda i: (-float(values[i]), i))
    return float(values[order[alpha - 1]])


def oracle_support(sims, base, gamma):
    """Support indices and the effective threshold.

    The tolerance gamma only ever relaxes the cutoff, so the threshold
    is min(gamma * kth, kth); indices come back ordered by descending
    similarity with ties broken by ascending index.
    """
    sims = [float(s) for s in sims]
    base = min(base, len(sims))
    kth = oracle_kth_largest(sims, base)
    tau = min(gamma * kth, kth)
    idx = [i for i in range(len(sims)) if sims[i] >= tau]
    idx.sort(key=lambda i: (-sims[i], i))
    return idx, tau


def oracle_coarse(capability, support_idx, support_sims):
    m = len(capability)
    g = [0.0] * m
    for j in range(m):
        for i, s in zip(support_idx, support_sims):
            g[j] += float(capability[j][i]) * float(s)
    return g


def oracle_response_sim(response_embeddings, support_idx, live_vectors, candidate_columns):
    """Sum over candidates of cos(bank response, live response), per support row."""
    out = []
    for i in support_idx:
        total = 0.0
        for vec, col in zip(live_vectors, candidate_columns):
            dot = 0.0
            for a, b in zip(response_embeddings[i][col], vec):
                dot += float(a) * float(b)
            total += dot
        out.append(total)
    return out


def oracle_cost_sim(costs, support_idx, live_costs, candidate_columns):
    """Sum over candidates of 1 - |c_bank^2 - c_live^2| / max-deviation."""
    out = [0.0] * len(support_idx)
    for live, col in zip(live_costs, candidate_columns):
        devs = [abs(float(costs[i][col]) ** 2 - float(live) ** 2) for i in support_idx]
        cm = max(devs)
        for p, dev in enumerate(devs):
            out[p] += 1.0 if cm == 0.0 else 1.0 - dev / cm
    return out


def oracle_mixed(support_sims, res_sims, cost_sims, epsilon, sigma, delta, k):
    return [
        epsilon * k * float(q) + sigma * float(r) + delta * float(c)
        for q, r, c in zip(support_sims, res_sims, cost_sims)
    ]


def oracle_filter(mixed, beta):
    keep = max(1, math.floor(beta * len(mixed)))
    thr = oracle_kth_largest(mixed, keep)
    return [p for p in range(len(mixed)) if float(mixed[p]) >= thr]


def oracle_fine(capability, support_idx, filtered_positions, mixed):
    m = len(capability)
    g = [0.0] * m
    for j in range(m):
        for p in filtered_positions:
            g[j] += float(capability[j][support_idx[p]]) * float(mixed[p])
    return g


def oracle_switch(fine, k, t):
    """Aggregatee set: top-k of fine, then the relative-score gate."""
    order = sorted(range(len(fine)), key=lambda i: (-float(fine[i]), i))
    top = order[:k]
    mx = max(float(v) for v in fine)
    return [i for i in top if float(fine[i]) / mx >= t]


def oracle_top_k(values, k):
    order = sorted(range(len(values)), key=lambda i: (-float(values[i]), i))
    return order[:k]


def oracle_price_microdollars(prompt_tokens, completion_tokens, input_per_mtok, output_per_mtok):
    """Exact micro-dollar price via integer arithmetic over decimal strings.

    price = (prompt * in + completion * out) / 1e6 dollars, computed as
    one exact rational and rounded half-even to the micro-dollar once.
    Deliberately avoids the decimal module so the library's
    Decimal-based path is checked by different machinery.
    """

    def as_scaled_int(text):
        text = str(text)
        if "." in text:
            whole, frac = text.split(".")
        else:
            whole, frac = text, ""
        digits = whole + frac
        return int(digits) if digits else 0, len(frac)

    si, pin = as_scaled_int(input_per_mtok)
    so, pout = as_scaled_int(output_per_mtok)
    # micro-dollars = (p*si*10^pout + c*so*10^pin) / 10^(pin+pout)
    num = prompt_tokens * si * 10 ** pout + completion_tokens * so * 10 ** pin
    den = 10 ** (pin + pout)
    q, r = divmod(num, den)
    if 2 * r > den or (2 * r == den and q % 2 == 1):
        q += 1
    return q
