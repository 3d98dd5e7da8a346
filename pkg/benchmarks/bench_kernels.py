"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both implementations are imported directly, so the comparison does not
depend on ``SECUREDIRECT_PURE_PYTHON``.
"""

from __future__ import annotations

import argparse
import random
import sys
import timeit

from securedirect import _pykernels
from securedirect.ids import Automaton, default_signatures

try:
    from securedirect import _ckernels
except ImportError:
    _ckernels = None


def cases(rng: random.Random):
    packet = bytes(rng.getrandbits(8) for _ in range(1500))
    page = bytes(rng.getrandbits(8) for _ in range(64 * 1024))
    auto = Automaton(default_signatures().patterns())
    return [
        ("checksum 1500 B", lambda k: k.ones_complement_sum(packet)),
        ("fnv1a64 1500 B", lambda k: k.fnv1a64(packet)),
        ("dfa scan 1500 B", lambda k: k.dfa_scan(auto.delta, auto.out_start, auto.out_ids, auto.n_patterns, packet)),
        ("dfa scan 64 KiB", lambda k: k.dfa_scan(auto.delta, auto.out_start, auto.out_ids, auto.n_patterns, page)),
    ]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    print(f"{'kernel':<18}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for name, fn in cases(random.Random(args.seed)):
        assert fn(_pykernels) == fn(_ckernels), name
        timings = []
        for impl in (_pykernels, _ckernels):
            timer = timeit.Timer(lambda: fn(impl))
            number, _ = timer.autorange()
            best = min(timer.repeat(args.repeat, number)) / number
            timings.append(best * 1e6)
        py, cy = timings
        print(f"{name:<18}{py:>12.1f}{cy:>12.2f}{py / cy:>9.0f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
