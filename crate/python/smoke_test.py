"""Smoke test for the `eafe` extension module.

Build and install with `maturin develop -m crates/python/Cargo.toml`, then
run `python python/smoke_test.py`.
"""

import math

import eafe


def main():
    # beta = 0: Z counts configurations
    assert eafe.log_z([3, 3], 0.0, seed=1) == 9 * math.log(2)
    a = eafe.log_z([3, 3], 1.0, seed=1, bc="periodic", method="enumeration")
    b = eafe.log_z([3, 3], 1.0, seed=1, bc="periodic", method="transfer")
    assert abs(a - b) < 1e-9, (a, b)

    dw = eafe.domain_wall([4, 4], 1.0, seed=2)
    assert math.isfinite(dw)

    ens = eafe.Ensemble([2, 2], seed=7, n=8, resamples=100)
    assert ens.box_extents == [4, 4]
    fe = ens.free_energy(0)
    assert fe["value"] == ens.free_energy(0)["value"]
    var = ens.variance()
    assert var["estimate"] > 0 and var["n"] == 8
    bounds = ens.bounds([0.5, 1.0])
    assert bounds["violations"] == 0

    same = eafe.Ensemble([2, 2], seed=7, n=4, gamma="periodic", resamples=50)
    assert same.probe([0.01])["rows"][0]["density"]["estimate"] == 0.0

    config = """
schema_version = 1
id = "smoke"

[ensemble]
gamma = "free"
gamma_prime = "periodic"
beta = 1.0
n = 5
seed = 3

[ensemble.geometry]
window = [2, 2]
margin = [1, 1]

[experiment]
kind = "ensemble"
"""
    rep = eafe.run_config(config)
    assert rep["kind"] == "ensemble" and rep["units"] == 5
    try:
        eafe.run_config(config.replace("n = 5", "n = 5\nbogus = 1"))
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")
    print("eafe", eafe.__version__, "smoke test ok")


if __name__ == "__main__":
    main()
