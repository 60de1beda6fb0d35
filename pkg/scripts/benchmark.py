#!/usr/bin/env python3
"""
성능 벤치마크 스크립트
사용법: PYTHONPATH=. python scripts/benchmark.py [--dim 3] [--rho 0.9] [--threads 1 2 4]
"""

import argparse
import statistics
import time
from typing import List, Tuple

import numpy as np

from latmax.covariance import eta_for_rho, kronecker_cov
from latmax.fieldsim import simulate
from latmax.lattice import build_neighborhood
from latmax.mcdlm import sample_local_maxima
from latmax.schemas import KernelSpec, LatticeSpec, SimSpec


def benchmark_sampler(dim: int, rho: float, target_n: int, threads: int, repeats: int) -> Tuple[List[float], int]:
    """MCDLM 샘플러 실행 시간 측정"""
    print(f"🔄 Sampler: D={dim}, rho={rho}, N={target_n}, threads={threads}")
    cov = kronecker_cov(rho, dim, build_neighborhood("fc", dim))

    times = []
    attempted = 0
    reference = None
    for i in range(repeats):
        start = time.perf_counter()
        s = sample_local_maxima(cov, target_n=target_n, seed=11, threads=threads)
        times.append(time.perf_counter() - start)
        attempted = s.n_attempted
        # 스레드 수와 무관하게 같은 결과여야 함
        if reference is None:
            reference = s.heights
        elif not np.array_equal(reference, s.heights):
            print(f"  ❌ Run {i+1} differs from run 1")
        print(f"  Run {i+1}/{repeats}: {times[-1]:.2f}s, acceptance {s.acceptance_rate:.4f}")
    return times, attempted


def benchmark_simulation(dim: int, size: int, rho: float, n_fields: int, threads: int) -> List[float]:
    """필드 시뮬레이션 시간 측정 (필드당)"""
    print(f"⚡ Simulation: D={dim}, size={size}, rho={rho}, fields={n_fields}, threads={threads}")
    spec = SimSpec(
        lattice=LatticeSpec.cube(dim, size), kernel=KernelSpec.isotropic(eta_for_rho(rho)), n_fields=n_fields, seed=12
    )
    times = []
    start = time.perf_counter()
    for _ in simulate(spec, threads=threads):
        now = time.perf_counter()
        times.append(now - start)
        start = now
    return times


def print_statistics(label: str, times: List[float], units: int, unit_name: str):
    """통계 출력"""
    if not times:
        print("❌ No successful runs")
        return

    print(f"\n📊 {label} Statistics:")
    print("-" * 40)
    print(f"Runs: {len(times)}")
    print(f"Total Time: {sum(times):.2f}s")
    print(f"Average Time: {statistics.mean(times):.3f}s")
    print(f"Median Time: {statistics.median(times):.3f}s")
    print(f"Min Time: {min(times):.3f}s")
    print(f"Max Time: {max(times):.3f}s")
    if len(times) > 1:
        print(f"Std Dev Time: {statistics.stdev(times):.3f}s")
    print(f"{unit_name} per Second: {units * len(times) / sum(times):,.1f}")


def main():
    """메인 벤치마크 함수"""
    parser = argparse.ArgumentParser(description="latmax performance benchmark")
    parser.add_argument("--dim", type=int, default=3, help="Lattice dimension")
    parser.add_argument("--rho", type=float, default=0.9, help="Adjacent-voxel correlation")
    parser.add_argument("--target-n", type=int, default=200_000, help="Accepted maxima per sampler run")
    parser.add_argument("--repeats", type=int, default=3, help="Sampler runs per thread count")
    parser.add_argument("--threads", type=int, nargs="+", default=[1, 2, 4], help="Thread counts to compare")
    parser.add_argument("--size", type=int, default=64, help="Simulated field side length")
    parser.add_argument("--fields", type=int, default=20, help="Simulated fields")
    parser.add_argument("--skip-simulation", action="store_true", help="Only benchmark the sampler")

    args = parser.parse_args()

    print("🚀 Starting latmax Performance Benchmark")
    print("=" * 60)
    print(f"Dimension: {args.dim}")
    print(f"Rho: {args.rho}")
    print(f"Target N: {args.target_n}")
    print(f"Threads: {args.threads}")
    print("=" * 60)

    # 샘플러 벤치마크
    for threads in args.threads:
        times, attempted = benchmark_sampler(args.dim, args.rho, args.target_n, threads, args.repeats)
        print_statistics(f"Sampler (threads={threads})", times, attempted, "Attempts")

    # 시뮬레이션 벤치마크
    if not args.skip_simulation:
        for threads in args.threads:
            times = benchmark_simulation(args.dim, args.size, args.rho, args.fields, threads)
            print_statistics(f"Simulation (threads={threads})", times, 1, "Fields")


if __name__ == "__main__":
    main()
