#!/usr/bin/env python3
"""Independent recount of instance-file statistics.

Reads a JSON-lines instance file and prints the instance count, the mean
candidate count and the mean answer count, one value per line. Kept free of
any project code on purpose: it cross-checks the stats the generator reports.
"""
import json
import sys


def main() -> int:
    if len(sys.argv) != 2:
        print("usage: recount.py <instances.jsonl>", file=sys.stderr)
        return 2
    n = 0
    candidates = 0
    answers = 0
    with open(sys.argv[1], encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            n += 1
            candidates += len(obj["candidates"])
            answers += len(obj["answers"])
    print(n)
    print(repr(candidates / n) if n else "None")
    print(repr(answers / n) if n else "None")
    return 0


if __name__ == "__main__":
    sys.exit(main())
