"""Test-only wire-protocol server backed by the in-process oracle.

Exists to exercise the client: framing, id correlation, timeouts, and
malformed-response handling (via the failure-injection modes). The
independently implemented server lives in the reference_oracle package.
"""
import argparse
import json
import socket
import sys
import time

import numpy as np

from csd.oracle import Condition, GuidanceParams, edit_oracle_eps, edit_oracle_from_spec
from csd.schedule import NoiseSchedule


def answer(line: str, oracle, sched, mode: str) -> str:
    req = json.loads(line)
    rid = req["id"]
    if mode == "bad-id":
        rid += 1000
    if mode == "error":
        return json.dumps({"id": rid, "error": "boom"})
    cond_data = req["cond"]
    cond = Condition(cond_data["kind"], cond_data.get("source_ref"), cond_data.get("text_ref"))
    g = GuidanceParams(omega_y=cond_data["omega_y"], omega_s=cond_data["omega_s"])
    eps = edit_oracle_eps(oracle, sched, np.asarray(req["x_t"], dtype=float), req["t"], cond, g)
    if mode == "short-eps":
        eps = eps[:-1]
    return json.dumps({"id": rid, "eps": eps.tolist()})


def serve(lines, out, oracle, sched, mode: str) -> None:
    buffer = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if mode == "stall":
            time.sleep(30)
        if mode == "reorder":
            buffer.append(line)
            if len(buffer) == 2:
                for pending in reversed(buffer):
                    out.write(answer(pending, oracle, sched, "normal") + "\n")
                out.flush()
                buffer = []
            continue
        out.write(answer(line, oracle, sched, mode) + "\n")
        out.flush()
    for pending in buffer:
        out.write(answer(pending, oracle, sched, "normal") + "\n")
        out.flush()


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--oracle", required=True)
    parser.add_argument("--mode", default="normal")
    parser.add_argument("--tcp", action="store_true")
    args = parser.parse_args()

    with open(args.oracle, "r", encoding="utf-8") as f:
        spec = json.load(f)
    oracle = edit_oracle_from_spec(spec)
    sched_spec = spec.get("schedule") or {}
    sched = NoiseSchedule(
        kind=sched_spec.get("kind", "vp-cosine"),
        t_min=sched_spec.get("t_min", 0.0),
        t_max=sched_spec.get("t_max", 1.0),
    )

    if args.tcp:
        listener = socket.create_server(("127.0.0.1", 0))
        print(f"PORT {listener.getsockname()[1]}", flush=True)
        conn, _ = listener.accept()
        with conn:
            rfile = conn.makefile("r", encoding="utf-8")
            wfile = conn.makefile("w", encoding="utf-8", newline="\n")
            serve(rfile, wfile, oracle, sched, args.mode)
    else:
        serve(sys.stdin, sys.stdout, oracle, sched, args.mode)


if __name__ == "__main__":
    main()
