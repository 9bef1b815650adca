#!/usr/bin/env python3
"""Reference external model for the subprocess bridge.

Serves the projection onto feature 0 over the line protocol: one JSON
object per line on stdin, one JSON reply per line on stdout.

    {"op": "hello"}                          -> {"k": 1, "name": "..."}
    {"id": N, "op": "predict", "x": [[..]]}  -> {"id": N, "y": [[..]]}

Python's repr prints floats with shortest round-trip precision, so echoed
values are bit-exact.
"""
import json
import sys


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        op = msg.get("op")
        if op == "hello":
            reply = {"k": 1, "name": "reference_select_feature_0"}
        elif op == "predict":
            reply = {"id": msg["id"], "y": [[row[0]] for row in msg["x"]]}
        else:
            reply = {"error": "unknown op %r" % op}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
