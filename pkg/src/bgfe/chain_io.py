"""Chain serialization: one wide CSV row per stored draw plus a JSON
sidecar with run metadata.

Columns: draw index, occupied-group count, concentration, log-likelihood,
per-unit group indices (1-based), group-indexed coefficient and variance
columns padded to the widest draw, then common coefficients.  Numeric
values are written with repr, so identical chains serialize to identical
bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
from typing import Optional

import numpy as np

from .gibbs import PosteriorChain


def _fmt(value: float) -> str:
    return repr(float(value))


def save_chain(chain: PosteriorChain, csv_path, meta_path=None,
               extra_meta: Optional[dict] = None) -> None:
    s = len(chain)
    n = chain.n_units
    p = chain.meta.get("p_grouped", chain.alpha[0].shape[1] if s else 1)
    q = chain.meta.get("q_common", 0)
    k_max = int(chain.k.max()) if s else 0
    header = ["draw", "k", "a", "loglik"]
    header += [f"g_{i + 1}" for i in range(n)]
    for kk in range(k_max):
        header += [f"alpha_{kk + 1}_{j + 1}" for j in range(p)]
    header += [f"sigma2_{kk + 1}" for kk in range(k_max)]
    header += [f"gamma_{j + 1}" for j in range(q)]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for sdx in range(s):
            k_s = int(chain.k[sdx])
            row = [sdx, k_s, _fmt(chain.a[sdx]), _fmt(chain.loglik[sdx])]
            row += [int(gi) + 1 for gi in chain.g[sdx]]
            alpha = chain.alpha[sdx]
            for kk in range(k_max):
                row += [_fmt(alpha[kk, j]) if kk < k_s else "" for j in range(p)]
            sig = chain.sigma2[sdx]
            row += [_fmt(sig[kk]) if kk < k_s else "" for kk in range(k_max)]
            if q:
                row += [_fmt(v) for v in chain.gamma[sdx]]
            writer.writerow(row)
    if meta_path is not None:
        meta = dict(chain.meta)
        if extra_meta:
            meta.update(extra_meta)
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_chain(csv_path, meta_path=None) -> PosteriorChain:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    n = sum(1 for h in header if h.startswith("g_"))
    p_cols = [h for h in header if h.startswith("alpha_")]
    k_max = max((int(h.split("_")[1]) for h in p_cols), default=0)
    p = max((int(h.split("_")[2]) for h in p_cols), default=1)
    q = sum(1 for h in header if h.startswith("gamma_"))
    col = {name: idx for idx, name in enumerate(header)}
    s = len(rows)
    g = np.empty((s, n), dtype=np.int32)
    k_arr = np.empty(s, dtype=np.int32)
    a_arr = np.empty(s)
    ll = np.empty(s)
    alpha_list = []
    sigma_list = []
    gamma = np.empty((s, q)) if q else None
    for sdx, row in enumerate(rows):
        k_s = int(row[col["k"]])
        k_arr[sdx] = k_s
        a_arr[sdx] = float(row[col["a"]])
        ll[sdx] = float(row[col["loglik"]])
        g[sdx] = [int(row[col[f"g_{i + 1}"]]) - 1 for i in range(n)]
        alpha = np.empty((k_s, p))
        for kk in range(k_s):
            for j in range(p):
                alpha[kk, j] = float(row[col[f"alpha_{kk + 1}_{j + 1}"]])
        alpha_list.append(alpha)
        sigma_list.append(
            np.array([float(row[col[f"sigma2_{kk + 1}"]]) for kk in range(k_s)])
        )
        if q:
            gamma[sdx] = [float(row[col[f"gamma_{j + 1}"]]) for j in range(q)]
    meta = {"p_grouped": p, "q_common": q}
    if meta_path is not None:
        with open(meta_path, encoding="utf-8") as fh:
            meta.update(json.load(fh))
    return PosteriorChain(g=g, k=k_arr, a=a_arr, alpha=alpha_list,
                          sigma2=sigma_list, gamma=gamma, loglik=ll, meta=meta)


def config_hash(payload: dict) -> str:
    """Stable short hash of a resolved configuration dictionary."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
