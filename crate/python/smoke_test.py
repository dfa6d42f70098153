"""Smoke test for the ncmfair Python bindings.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import json
import math

import ncmfair_py as nf


def main():
    scm = nf.Scm.default()
    data = scm.sample(400, seed=0)
    assert len(data) == 400
    train, test = data.split(0.8, seed=0)
    assert (len(train), len(test)) == (320, 80)
    assert train.normalized

    k = nf.Kernel(1.0)
    assert abs(k([0.0], [0.0]) - 1.0) < 1e-15
    assert k.mmd2(train.x[:50], train.x[:50]) < 1e-12
    assert nf.Kernel.median_heuristic(train.x).rho > 0

    mean, cov = scm.posterior(data.x[0], data.a[0][0])
    assert len(mean) == scm.d_u and len(cov) == scm.d_u

    oracle = nf.Ncm.oracle(scm, train)
    cf = oracle.counterfactual(test.x[0], test.a[0], [0.5], 8, seed=1)
    assert len(cf) == 8 and len(cf[0]) == scm.d_x

    cfg = json.dumps({"steps": 10, "n_gen": 32, "n_pos": 32, "n_ctf": 4, "n_reg": 8, "log_every": 5})
    ncm = nf.Ncm.train(train, seed=0, config_json=cfg)
    assert ncm.history and all(math.isfinite(r[-1]) for r in ncm.history)
    assert len(ncm.abduct(test.x[0], test.a[0], 4, seed=2)) == 4

    fair_cfg = json.dumps({"steps": 10, "n_fair": 16, "q_abd": 4})
    runs = {}
    for method in ("mmd", "mean_mse"):
        pts = []
        for lam in (0.0, 1.0, 10.0):
            cfg2 = json.dumps({**json.loads(fair_cfg), "fairness_loss": method})
            out = json.loads(oracle.train_fair(train, test, lam, seed=0, config_json=cfg2))
            p = out["point"]
            pts.append((p["method"], p["lambda_fair"], p["seed"], p["E"], p["F"], p["mse"]))
        runs[method] = pts
    verdict = json.loads(nf.compare(runs["mmd"], runs["mean_mse"]))["verdict"]
    assert verdict in ("mmd", "mean_mse", "tie")
    print("python smoke test ok; verdict", verdict)


if __name__ == "__main__":
    main()
