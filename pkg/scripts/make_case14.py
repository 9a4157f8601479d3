"""Generate the bundled 14-bus desk case from the public 14-bus test system
parameters, with our own ratings, cost curves and dispatch chosen so the
base point is N-1 secure under the bundled emergency ratings."""

import json
import pathlib

# bus id, type, v_setpoint
BUSES = [
    (1, "slack", 1.060), (2, "pv", 1.045), (3, "pv", 1.010), (4, "pq", 1.0),
    (5, "pq", 1.0), (6, "pv", 1.070), (7, "pq", 1.0), (8, "pv", 1.090),
    (9, "pq", 1.0), (10, "pq", 1.0), (11, "pq", 1.0), (12, "pq", 1.0),
    (13, "pq", 1.0), (14, "pq", 1.0),
]

# from, to, r, x, b, tap
BRANCHES = [
    (1, 2, 0.01938, 0.05917, 0.0528, 1.0),
    (1, 5, 0.05403, 0.22304, 0.0492, 1.0),
    (2, 3, 0.04699, 0.19797, 0.0438, 1.0),
    (2, 4, 0.05811, 0.17632, 0.0340, 1.0),
    (2, 5, 0.05695, 0.17388, 0.0346, 1.0),
    (3, 4, 0.06701, 0.17103, 0.0128, 1.0),
    (4, 5, 0.01335, 0.04211, 0.0, 1.0),
    (4, 7, 0.0, 0.20912, 0.0, 0.978),
    (4, 9, 0.0, 0.55618, 0.0, 0.969),
    (5, 6, 0.0, 0.25202, 0.0, 0.932),
    (6, 11, 0.09498, 0.19890, 0.0, 1.0),
    (6, 12, 0.12291, 0.25581, 0.0, 1.0),
    (6, 13, 0.06615, 0.13027, 0.0, 1.0),
    (7, 8, 0.0, 0.17615, 0.0, 1.0),
    (7, 9, 0.0, 0.11001, 0.0, 1.0),
    (9, 10, 0.03181, 0.08450, 0.0, 1.0),
    (9, 14, 0.12711, 0.27038, 0.0, 1.0),
    (10, 11, 0.08205, 0.19207, 0.0, 1.0),
    (12, 13, 0.22092, 0.19988, 0.0, 1.0),
    (13, 14, 0.17093, 0.34802, 0.0, 1.0),
]

# bus, p, q
LOADS = [
    (2, 21.7, 12.7), (3, 94.2, 19.0), (4, 47.8, -3.9), (5, 7.6, 1.6),
    (6, 11.2, 7.5), (9, 29.5, 16.6), (10, 9.0, 5.8), (11, 3.5, 1.8),
    (12, 6.1, 1.6), (13, 13.5, 5.8), (14, 14.9, 5.0),
]

# bus, p_min, p_max, q_min, q_max, ramp, sched_p, segments, reserve_cost
GENS = [
    (1, 0.0, 332.4, -60.0, 120.0, 120.0, 70.0,
     [[120.0, 18.0], [240.0, 24.0], [332.4, 31.0]], 3.0),
    (2, 0.0, 140.0, -40.0, 60.0, 80.0, 70.0,
     [[70.0, 22.0], [140.0, 29.0]], 4.0),
    (3, 0.0, 100.0, -20.0, 50.0, 60.0, 55.0,
     [[50.0, 26.0], [100.0, 34.0]], 5.0),
    (6, 0.0, 100.0, -15.0, 40.0, 60.0, 40.0,
     [[50.0, 30.0], [100.0, 38.0]], 5.0),
    (8, 0.0, 100.0, -15.0, 40.0, 60.0, 25.0,
     [[50.0, 33.0], [100.0, 42.0]], 6.0),
]

# per-branch normal MVA ratings (emergency = 1.15x); calibrated so the bundled
# dispatch clears RTCA with headroom but limits still bind under stress
RATINGS = {
    (1, 2): 120.0, (1, 5): 75.0, (2, 3): 75.0, (2, 4): 70.0, (2, 5): 70.0,
    (3, 4): 60.0, (4, 5): 75.0, (4, 7): 55.0, (4, 9): 40.0, (5, 6): 70.0,
    (6, 11): 40.0, (6, 12): 35.0, (6, 13): 45.0, (7, 8): 45.0, (7, 9): 55.0,
    (9, 10): 40.0, (9, 14): 40.0, (10, 11): 40.0, (12, 13): 35.0, (13, 14): 35.0,
}


def build():
    doc = {
        "schema_version": 1,
        "base_mva": 100.0,
        "buses": [
            {"id": i, "base_kv": 138.0 if i <= 5 else 69.0, "type": t,
             "v_mag": v, "v_ang": 0.0, "v_min": 0.9, "v_max": 1.1, "area": 1}
            for i, t, v in BUSES
        ],
        "branches": [
            {"id": k + 1, "from_bus": f, "to_bus": t, "r": r, "x": x,
             "b_charging": b, "tap_ratio": tap, "status": True,
             "s_max": RATINGS[(f, t)], "s_max_emergency": round(RATINGS[(f, t)] * 1.15, 3)}
            for k, (f, t, r, x, b, tap) in enumerate(BRANCHES)
        ],
        "generators": [
            {"id": k + 1, "bus": bus, "p_min": pmin, "p_max": pmax,
             "q_min": qmin, "q_max": qmax, "ramp_rate": ramp,
             "cost_curve": curve, "reserve_cost": rc, "status": True, "p": p}
            for k, (bus, pmin, pmax, qmin, qmax, ramp, p, curve, rc) in enumerate(GENS)
        ],
        "loads": [
            {"id": k + 1, "bus": bus, "p": p, "q": q, "sheddable": True}
            for k, (bus, p, q) in enumerate(LOADS)
        ],
        "interfaces": [
            {"id": 1, "branches": [[8, 1], [9, 1], [10, 1]], "limit_mw": 120.0}
        ],
    }
    return doc


if __name__ == "__main__":
    out = pathlib.Path(__file__).resolve().parents[1] / "src/gridems/cases/case14.json"
    out.write_text(json.dumps(build(), indent=1))
    print(f"wrote {out}")
