"""Smoke test for the spinlife Python extension.

Build and install first, e.g.

    cd crates/python && maturin build --release -o dist && pip install dist/*.whl

then run `python python/smoke_test.py`.
"""

import math

import spinlife


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    params = spinlife.SpinModelParams(tau_up=20.0, tau_down=12.0, sigma_tau=0.0)
    geom = spinlife.FieldGeometry(0.0)
    irf = spinlife.IrfModel.parse("0.5,5.0")
    check((irf.s, irf.t0) == (0.5, 5.0), "IRF literal parses")

    # zero field: the RCP population never leaves the up channel
    n = spinlife.expected_decay(params, geom, "RCP", 20.0)
    check(abs(n / params.n0 - math.exp(-1.0)) < 1e-12, "expected decay at B = 0")

    # channel swap + phase swap leave the decay unchanged
    g = spinlife.FieldGeometry(300.0, phi_deg=20.0)
    a = spinlife.expected_decay(params, g, "RCP", 13.0)
    b = spinlife.expected_decay(params.mirrored(), g, "LCP", 13.0)
    check(abs(a - b) <= 1e-12 * a, "phase-swap identity")

    h = spinlife.simulate(params, geom, "RCP", seed=1, irf=irf)
    again = spinlife.simulate(params, geom, "RCP", seed=1, irf=irf)
    check(h.counts == again.counts, "simulation is reproducible")
    back = spinlife.DecayHistogram.from_csv(h.to_csv())
    check(back.counts == h.counts and len(back) == len(h), "histogram CSV round-trip")

    amp, tau, tau_err, c, chi2 = spinlife.fit_mono(h, irf)
    check(abs(tau - 20.0) < 0.02 * 20.0, f"mono fit recovers tau_up ({tau:.3f} ± {tau_err:.3f})")

    try:
        spinlife.fit_biexp(h, irf)
        check(False, "single exponential rejected by biexponential fit")
    except spinlife.IllConditionedError:
        check(True, "single exponential rejected by biexponential fit")

    # noise-free biexponential on a fine grid
    truth = [1000.0, 5000.0, 20.0, 3.0, 10.0]
    values = [spinlife.model_eval(truth, irf, (i + 0.5) * 0.05) for i in range(4096)]
    r = spinlife.fit_biexp_values(values, 0.0, 0.05, irf)
    check(abs(r.tau1 - 20.0) < 1e-3 and abs(r.tau2 - 3.0) < 1e-3, f"biexponential fit {r!r}")

    sweep = spinlife.run_sweep(
        spinlife.SpinModelParams(),
        irf,
        b_values=[60.0 + 20.0 * i for i in range(25)],
        phi_values=[0.0],
        oracle=True,
    )
    check(sweep.failures() == 0, "oracle sweep fits every point")
    b1 = sweep.first_extremum(0.0)
    check(200.0 < b1 < 400.0, f"first extremum at {b1:.1f} G")

    try:
        spinlife.SpinModelParams(tau_up=-1.0)
        check(False, "invalid lifetime rejected")
    except ValueError:
        check(True, "invalid lifetime rejected")
    print("smoke test passed")


if __name__ == "__main__":
    main()
