"""Compare the compiled and pure-Python hashing kernels.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. Each case is
timed with ``timeit`` and the best of N runs is reported.
"""
import argparse
import random
import timeit
from contextlib import contextmanager

from examchain import _kernels_py, ledger, state
from examchain.workload import Cast, exam_cycle

try:
    from examchain import _kernels
except ImportError:
    _kernels = None


@contextmanager
def backend(module):
    """Point the ledger and state modules at one kernel implementation."""
    saved = (ledger.merkle_root_of, ledger.merkle_root_from_leaves, state.merkle_root_of)
    ledger.merkle_root_of = module.merkle_root_of
    ledger.merkle_root_from_leaves = module.merkle_root
    state.merkle_root_of = module.merkle_root_of
    try:
        yield
    finally:
        ledger.merkle_root_of, ledger.merkle_root_from_leaves, state.merkle_root_of = saved


def best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def build_chain(n_students, per_block=20):
    """Encoded blocks carrying a full exam cycle, ``per_block`` transactions each."""
    cast = Cast("bench", 4)
    cycle = exam_cycle(cast, 5, n_students=n_students)
    txs = cycle.transactions
    blocks = [ledger.genesis(cycle.config)]
    world = state.WorldState.from_config(cycle.config)
    for i in range(0, len(txs), per_block):
        chunk = txs[i:i + per_block]
        tip = blocks[-1]
        trial = world.copy()
        trial.height = tip.height + 1
        for tx in chunk:
            state.try_apply(trial, tx)
        block = ledger.make_block(trial.height, tip.header.hash(), chunk, trial.root(),
                                  100 + trial.height, cast.nodes[0])
        world = state.execute_block(world, block)
        blocks.append(block)
    return [b.encoded for b in blocks]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled kernels are not built; nothing to compare")
        return 1

    rng = random.Random(0)
    rows = []
    for size in (16, 256, 4096, 65536):
        items = [rng.randbytes(96) for _ in range(size)]
        leaves = _kernels_py.leaf_hashes(items)
        assert _kernels.merkle_root(leaves) == _kernels_py.merkle_root(leaves)
        number = max(1, 20000 // size)
        for label, case in (("leaf_hashes", lambda m: m.leaf_hashes(items)),
                            ("merkle_root", lambda m: m.merkle_root(leaves))):
            py = best(lambda: case(_kernels_py), args.repeat, number)
            cy = best(lambda: case(_kernels), args.repeat, number)
            rows.append((f"{label} n={size}", py, cy))

    records = build_chain(60)
    for module in (_kernels_py, _kernels):
        with backend(module):
            assert ledger.verify_chain(records) is None
    timings = []
    for module in (_kernels_py, _kernels):
        with backend(module):
            timings.append(best(lambda: ledger.verify_chain(records), args.repeat, 3))
    rows.append((f"verify_chain blocks={len(records)}", *timings))

    print(f"{'case':<28}{'python':>12}{'cython':>12}{'speedup':>10}")
    for label, py, cy in rows:
        print(f"{label:<28}{py * 1e3:>10.3f}ms{cy * 1e3:>10.3f}ms{py / cy:>9.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
