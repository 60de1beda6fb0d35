#!/usr/bin/env python3
"""
수용 기준 검증 스크립트
사용법: PYTHONPATH=. python scripts/acceptance.py [--scale 0.1] [--only 1 2 11]
"""

import argparse
import time
from typing import Callable, List, Tuple

import numpy as np
from scipy import stats

from latmax.adlm import adlm_pvalues, q_factor
from latmax.covariance import (
    NeighborhoodCov,
    conditional_cov,
    empirical_cov,
    eta_for_rho,
    kernel_cov,
    kronecker_cov,
    kronecker_matrix,
    mixture_cov,
)
from latmax.fieldsim import reference_distribution, simulate
from latmax.lattice import build_neighborhood
from latmax.lookup import build_table, query, smooth_table
from latmax.mcdlm import SamplingModel, gaussianize_values, peak_pvalues, sample_local_maxima
from latmax.pipeline import StudyData, analyze_peaks
from latmax.schemas import AdlmParams, KernelSpec, LatticeSpec, SimSpec
from latmax.validate import kolmogorov, kolmogorov_2samp, mean_ratio, pp_data

# 3x3 블록, rho = 0.99 이론 상관행렬 (첫 축이 가장 빠르게 변하는 base-3 순서)
SMOOTH_2D = [
    [1.0000, 0.9900, 0.9606, 0.9900, 0.9801, 0.9510, 0.9606, 0.9510, 0.9227],
    [0.9900, 1.0000, 0.9900, 0.9801, 0.9900, 0.9801, 0.9510, 0.9606, 0.9510],
    [0.9606, 0.9900, 1.0000, 0.9510, 0.9801, 0.9900, 0.9227, 0.9510, 0.9606],
    [0.9900, 0.9801, 0.9510, 1.0000, 0.9900, 0.9606, 0.9900, 0.9801, 0.9510],
    [0.9801, 0.9900, 0.9801, 0.9900, 1.0000, 0.9900, 0.9801, 0.9900, 0.9801],
    [0.9510, 0.9801, 0.9900, 0.9606, 0.9900, 1.0000, 0.9510, 0.9801, 0.9900],
    [0.9606, 0.9510, 0.9227, 0.9900, 0.9801, 0.9510, 1.0000, 0.9900, 0.9606],
    [0.9510, 0.9606, 0.9510, 0.9801, 0.9900, 0.9801, 0.9900, 1.0000, 0.9900],
    [0.9227, 0.9510, 0.9606, 0.9510, 0.9801, 0.9900, 0.9606, 0.9900, 1.0000],
]

FIELD_SIZE = 50


def scaled(n: int, scale: float, floor: int = 10) -> int:
    return max(floor, int(round(n * scale)))


def field_spec(rho: float, n_fields: int, seed: int, **kw) -> SimSpec:
    """인접 상관 rho를 갖는 2D 등방 커널 시뮬레이션 설정"""
    return SimSpec(
        lattice=LatticeSpec.cube(2, FIELD_SIZE),
        kernel=KernelSpec.isotropic(eta_for_rho(rho)),
        n_fields=n_fields,
        seed=seed,
        **kw,
    )


def pp_gap(reference_p, method_p) -> float:
    """pp 곡선과 항등선 사이의 최대 거리"""
    data = pp_data(reference_p, {"m": method_p})
    return float(np.max(np.abs(data.methods["m"] - data.reference)))


def report(name: str, value: float, bound: str, ok: bool) -> bool:
    print(f"  {name}: {value:.4g} (기준 {bound}) {'✅' if ok else '❌'}")
    return ok


def check_iid_oracle(scale: float) -> bool:
    """1. 독립 오라클: Sigma = I, 2D FC에서 생존함수 = 1 - Phi(u)^9"""
    nbhd = build_neighborhood("fc", 2)
    start = time.perf_counter()
    s = sample_local_maxima(NeighborhoodCov(nbhd, np.eye(9), "empirical"), target_n=scaled(100_000, scale))
    elapsed = time.perf_counter() - start
    ks = kolmogorov(s.heights, lambda u: stats.norm.cdf(u) ** 9)
    return report("Kolmogorov", ks, "< 0.01", ks < 0.01) and report("seconds", elapsed, "< 10", elapsed < 10)


def check_kronecker(scale: float) -> bool:
    """2. Kronecker 공분산이 이론 행렬을 소수점 4자리까지 재현"""
    diff = np.max(np.abs(np.round(kronecker_matrix(0.99, 2), 4) - np.array(SMOOTH_2D)))
    return report("max |diff|", diff, "< 1e-12", diff < 1e-12)


def check_adlm_1d(scale: float) -> bool:
    """3. 1D에서 ADLM과 MCDLM 생존함수 수렴"""
    ok = True
    for rho in (0.5, 0.9):
        s = sample_local_maxima(kronecker_cov(rho, 1), target_n=scaled(1_000_000, scale))
        u = s.heights[:: max(1, s.n_accepted // 2000)]
        mc, _ = peak_pvalues(s, u)
        gap = float(np.max(np.abs(adlm_pvalues(AdlmParams.isotropic(rho, 1), u) - mc)))
        ok &= report(f"rho={rho} sup gap", gap, "< 0.01", gap < 0.01)
    return ok


def check_pc_agreement(scale: float) -> bool:
    """4. 2D PC에서 ADLM/MCDLM 모두 참조 분포와 일치"""
    nbhd = build_neighborhood("pc", 2)
    ok = True
    for i, rho in enumerate((0.01, 0.5)):
        spec = field_spec(rho, scaled(1000, scale), seed=400 + i)
        ref = reference_distribution(simulate(spec), nbhd)
        cov = kernel_cov(spec.kernel, spec.lattice, nbhd)
        mc, _ = peak_pvalues(sample_local_maxima(cov), ref.heights)
        rhos = cov.adjacent_correlations()
        adlm = adlm_pvalues(AdlmParams(rhos=rhos), ref.heights)
        ok &= report(f"rho={rho} MCDLM pp gap", pp_gap(ref.pvalues, mc), "< 0.02", pp_gap(ref.pvalues, mc) < 0.02)
        ok &= report(f"rho={rho} ADLM pp gap", pp_gap(ref.pvalues, adlm), "< 0.02", pp_gap(ref.pvalues, adlm) < 0.02)
    return ok


def check_fc_mean_ratio(scale: float) -> bool:
    """5. 2D FC, rho = 0.5: MCDLM 평균비 ~1, ADLM은 진보적(< 0.8)"""
    nbhd = build_neighborhood("fc", 2)
    spec = field_spec(0.5, scaled(1000, scale), seed=500)
    ref = reference_distribution(simulate(spec), nbhd)
    cov = kernel_cov(spec.kernel, spec.lattice, nbhd)
    mc, _ = peak_pvalues(sample_local_maxima(cov), ref.heights)
    adlm = adlm_pvalues(AdlmParams(rhos=cov.adjacent_correlations()), ref.heights)
    window = (0.01, 0.10)
    r_mc = mean_ratio(ref.pvalues, mc, window)
    r_adlm = mean_ratio(ref.pvalues, adlm, window)
    return report("MCDLM mean ratio", r_mc, "in [0.90, 1.10]", 0.90 <= r_mc <= 1.10) & report(
        "ADLM mean ratio", r_adlm, "< 0.80", r_adlm < 0.80
    )


def check_conditional_independence(scale: float) -> bool:
    """6. 중심이 주어졌을 때 서로 다른 축의 이웃은 조건부 독립"""
    worst = 0.0
    for dim in (2, 3):
        nbhd = build_neighborhood("pc", dim)
        for rho in (0.01, 0.5, 0.99):
            cond, rest = conditional_cov(kronecker_cov(rho, dim, nbhd), [0])
            axes = [int(np.flatnonzero(nbhd.offsets[i - 1])[0]) for i in rest]
            for a in range(len(rest)):
                for b in range(len(rest)):
                    if axes[a] != axes[b]:
                        worst = max(worst, abs(cond[a, b]))
    return report("max cross-covariance", worst, "< 1e-12", worst < 1e-12)


def check_t_calibration(scale: float) -> bool:
    """7. t-필드(nu = 20) 피크 p-값의 보정"""
    nu = 20
    nbhd = build_neighborhood("fc", 2)
    spec = field_spec(0.5, scaled(500, scale), seed=700, model="t", nu=nu)
    ref = reference_distribution(simulate(spec), nbhd)
    cov = kernel_cov(spec.kernel, spec.lattice, nbhd)
    p_t, _ = peak_pvalues(sample_local_maxima(cov, SamplingModel.student_t(nu)), ref.heights)
    p_g, _ = peak_pvalues(sample_local_maxima(cov), gaussianize_values(ref.heights, nu))
    ks_t = kolmogorov_2samp(p_t, ref.pvalues)
    ks_g = kolmogorov_2samp(p_g, p_t)
    return report("MCDLM_T vs reference KS", ks_t, "< 0.03", ks_t < 0.03) & report(
        "Gaussianized vs t KS", ks_g, "< 0.04", ks_g < 0.04
    )


def check_covariance_recovery(scale: float) -> bool:
    """8. 경험적 공분산 복원과 그에 따른 MCDLM 일치"""
    nbhd = build_neighborhood("fc", 2)
    spec = field_spec(0.5, scaled(200, scale), seed=800)
    est = empirical_cov(list(simulate(spec)), nbhd)
    exact = kernel_cov(spec.kernel, spec.lattice, nbhd)
    diff = float(np.max(np.abs(est.matrix - exact.matrix)))
    n = scaled(1_000_000, scale)
    ks = kolmogorov_2samp(sample_local_maxima(est, target_n=n).heights, sample_local_maxima(exact, target_n=n).heights)
    return report("max |Sigma_hat - Sigma|", diff, "< 0.05", diff < 0.05) & report(
        "survival sup gap", ks, "< 0.01", ks < 0.01
    )


def check_mixture(scale: float) -> bool:
    """9. 비분리 혼합 필드에서 MCDLM pp 곡선"""
    lattice = LatticeSpec.cube(2, FIELD_SIZE)
    nbhd = build_neighborhood("fc", 2)
    kernel = KernelSpec.elliptical((eta_for_rho(0.01), eta_for_rho(0.5)))
    spec = SimSpec(lattice=lattice, kernel=kernel, model="mixture", n_fields=scaled(1000, scale), seed=900)
    ref = reference_distribution(simulate(spec), nbhd)
    cov = mixture_cov(kernel_cov(kernel, lattice, nbhd), kernel_cov(spec.kernel_b, lattice, nbhd))
    mc, _ = peak_pvalues(sample_local_maxima(cov), ref.heights)
    gap = pp_gap(ref.pvalues, mc)
    return report("MCDLM pp gap", gap, "< 0.02", gap < 0.02)


def check_lookup(scale: float) -> bool:
    """10. 평활화된 룩업 테이블과 직접 MCDLM 비교"""
    per_rho = scaled(20_000, scale, floor=2000)
    table = smooth_table(build_table(2, samples_per_rho=per_rho))
    monotone = bool(np.all(np.diff(table.cdf, axis=1) >= 0))
    gen = np.random.default_rng(1000)
    worst = 0.0
    for _ in range(20):
        i = int(gen.integers(0, table.rho_grid.size - 1))
        rho = 0.5 * (table.rho_grid[i] + table.rho_grid[i + 1])
        s = sample_local_maxima(kronecker_cov(rho, 2), target_n=200_000, seed=int(gen.integers(1 << 31)))
        u = float(np.quantile(s.heights, gen.uniform(0.05, 0.95)))
        direct, _ = peak_pvalues(s, u)
        worst = max(worst, abs(query(table, rho, u).value - float(direct)))
    return report("max |dp|", worst, "< 0.01", worst < 0.01) & report("rows monotone", monotone, "True", monotone)


def check_q_anchors(scale: float) -> bool:
    """11. Q 함수 기준값"""
    worst_zero = 0.0
    for rho in np.linspace(0.05, 0.95, 10):
        alpha = np.arcsin(np.sqrt((1 - rho * rho) / 2))
        worst_zero = max(worst_zero, abs(q_factor(rho, 0.0) - alpha / np.pi))
    worst_indep = max(abs(q_factor(0.0, z) - stats.norm.cdf(z) ** 2) for z in np.linspace(-3, 3, 25))
    return report("Q(rho, 0) error", worst_zero, "< 1e-9", worst_zero < 1e-9) & report(
        "Q(0, z) error", worst_indep, "< 1e-6", worst_indep < 1e-6
    )


def check_pipeline_fdr(scale: float) -> bool:
    """12. 귀무 연구에서 BH의 경험적 FDR"""
    nbhd = build_neighborhood("fc", 2)
    studies = scaled(200, scale)
    false_hits = 0
    for k in range(studies):
        spec = SimSpec(
            lattice=LatticeSpec.cube(2, 30), kernel=KernelSpec.isotropic(eta_for_rho(0.5)), n_fields=40, seed=1200 + k
        )
        result = analyze_peaks(StudyData(tuple(simulate(spec))), nbhd, "mcdlm_t", target_n=20_000, seed=k)
        # every peak is null, so V/R is 1 whenever anything is rejected
        false_hits += int(result.bh is not None and result.bh.n_rejected > 0)
    fdr = false_hits / studies
    return report("empirical FDR", fdr, "<= 0.07", fdr <= 0.07)


CHECKS: List[Tuple[str, Callable[[float], bool]]] = [
    ("IID oracle", check_iid_oracle),
    ("Kronecker exactness", check_kronecker),
    ("1D ADLM/MCDLM convergence", check_adlm_1d),
    ("PC agreement", check_pc_agreement),
    ("FC mean ratio", check_fc_mean_ratio),
    ("Conditional independence", check_conditional_independence),
    ("t-field calibration", check_t_calibration),
    ("Covariance recovery", check_covariance_recovery),
    ("Nonseparable mixture", check_mixture),
    ("Lookup fidelity", check_lookup),
    ("Q anchors", check_q_anchors),
    ("Pipeline FDR", check_pipeline_fdr),
]


def main():
    """메인 검증 함수"""
    parser = argparse.ArgumentParser(description="latmax acceptance checks")
    parser.add_argument("--scale", type=float, default=1.0, help="필드 수/표본 수 배율 (기준값은 1.0에서 유효)")
    parser.add_argument("--only", type=int, nargs="+", help="실행할 기준 번호")
    args = parser.parse_args()

    print("🚀 Starting acceptance checks...")
    print("=" * 50)

    results = []
    for number, (name, check) in enumerate(CHECKS, start=1):
        if args.only and number not in args.only:
            continue
        print(f"\n{'=' * 20} {number}. {name} {'=' * 20}")
        start = time.perf_counter()
        try:
            success = check(args.scale)
        except Exception as e:
            print(f"❌ {name}: ERROR - {e}")
            success = False
        results.append((name, success))
        print(f"{'✅' if success else '❌'} {name}: {'PASS' if success else 'FAIL'} ({time.perf_counter() - start:.1f}s)")

    # 결과 요약
    print("\n" + "=" * 50)
    print("📊 Acceptance Summary:")
    print("=" * 50)
    passed = sum(1 for _, ok in results if ok)
    for name, ok in results:
        print(f"{name}: {'✅ PASS' if ok else '❌ FAIL'}")
    print(f"\nOverall: {passed}/{len(results)} checks passed")
    if passed == len(results):
        print("🎉 All checks passed!")
    else:
        print("⚠️ Some checks failed. Check the output above.")


if __name__ == "__main__":
    main()
