"""Micro-benchmarks under the trimmed-measurement protocol.

Each case runs a fixed number of inference rounds; the lowest and highest
round times are discarded before averaging.  MAC annotations are exact and
shared with the analysis module; wall times are host-dependent and only
reported.
"""

from rapidnet.bench import BenchProtocol, bench_case

protocol = BenchProtocol(rounds=12, iters_per_round=5, trim=2, warmup=2)
shape = (1, 64, 28, 28)

print(f"input {shape}, {protocol.rounds} rounds x {protocol.iters_per_round} iters, "
      f"trim {protocol.trim}\n")
print(f"{'case':<22} {'MACs':>13} {'trimmed mean':>14} {'median':>12} {'min':>12}")
for case, kw in [
    ("dilated3x3", dict(dilation=3)),
    ("dense_kxk", dict(kernel=7)),
    ("pw_mixer", {}),
    ("mldc_block", {}),
]:
    r = bench_case(case, shape, protocol, **kw)
    print(f"{r.label:<22} {r.macs:>13,} {r.trimmed_mean_ns / 1e6:>11.2f} ms "
          f"{r.median_ns / 1e6:>9.2f} ms {r.min_ns / 1e6:>9.2f} ms")

print("\nfull JSON line for one case:")
print(bench_case("dilated3x3", (1, 16, 14, 14), protocol, dilation=3).to_json_line())
