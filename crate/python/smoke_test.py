"""Smoke test for the Python bindings.

Build and install first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/rtcnetlab-*.whl
"""

import json
import sys

import rtcnetlab


def check(cond, msg):
    if not cond:
        print(f"FAIL {msg}")
        sys.exit(1)
    print(f"ok   {msg}")


def main():
    names = rtcnetlab.presets()
    check("easy" in names and "congested_fec" in names, f"{len(names)} presets listed")

    doc = json.loads(rtcnetlab.preset_json("easy"))
    check(doc["name"] == "easy", "preset_json round-trips")

    a = rtcnetlab.run("easy", seed=3, duration_s=20)
    b = rtcnetlab.run("easy", seed=3, duration_s=20)
    check(a.csv() == b.csv(), "runs are deterministic")
    s = a.summary()
    check(s["conservation_holds"], "packet conservation holds")
    check(len(a.rows()) == 20, "one metrics row per second")

    tcp = rtcnetlab.run("congested_udp", seed=1, duration_s=20, transport="tcp")
    check(tcp.summary()["transport"] == "tcp", "transport override applied")

    ep = rtcnetlab.Episode("easy", seed=1, duration_s=10)
    obs = ep.reset()
    check(obs["step_id"] == 0 and ep.steps == 10, "episode reset")
    start = obs["current_target_bps"]
    obs, done = ep.step(start * 1.05)
    check(not done and obs["current_target_bps"] == start, "change inside the dead band is ignored")
    obs, done = ep.step("not a number")
    check(any("malformed" in w for w in obs.get("warnings", [])), "malformed action flagged")
    steps = 2
    while not done:
        obs, done = ep.step(3e6)
        steps += 1
    check(steps == 10 and obs is None, "episode ends after the last step")
    report = ep.report()
    check(report is not None and report.summary()["controller"] == "bridge", "episode report available")

    try:
        rtcnetlab.run("no-such-preset")
    except rtcnetlab.SimError as e:
        check("no-such-preset" in str(e), "unknown preset raises SimError")
    else:
        check(False, "unknown preset raises SimError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
