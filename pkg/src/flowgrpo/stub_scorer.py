"""Toy external scorer speaking the request/response exchange format.

    python -m flowgrpo.stub_scorer MODE REQUEST RESPONSE [SECONDS]

MODE is one of ``zero`` (score 0), ``first`` (first coordinate), ``norm``
(Euclidean norm), ``drop`` (omit the last id), ``sleep`` (wait SECONDS then
score 0) or ``garbage`` (unparsable output).
"""
from __future__ import annotations

import math
import sys
import time

from flowgrpo.rewards import read_request


def main(argv: list[str]) -> int:
    mode, req, resp = argv[:3]
    rows = read_request(req)
    if mode == "sleep":
        time.sleep(float(argv[3]) if len(argv) > 3 else 60.0)
    if mode == "drop":
        rows = rows[:-1]
    with open(resp, "w", encoding="utf-8", newline="\n") as fh:
        for sid, x in rows:
            if mode == "garbage":
                fh.write(f"{sid} not-a-score\n")
                continue
            if mode == "first":
                score = float(x[0])
            elif mode == "norm":
                score = math.sqrt(float(sum(v * v for v in x)))
            else:
                score = 0.0
            fh.write(f"{sid}\t{score!r}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
