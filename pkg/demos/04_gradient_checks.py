"""Every hand-written backward pass against central differences.

Each check draws a random float64 instance, perturbs every parameter and
input by +-1e-6 and compares with the analytic gradient. The differences are
taken in extended precision so the 1e-5 relative tolerance is meaningful
even for tiny gradient entries.
"""

from speechground.gradcheck import CHECKS, check_pipeline

for name, check in CHECKS.items():
    reports = [check(seed) for seed in range(5)]
    worst = max(r.overall_error for r in reports)
    print(f"{name:9s} {'ok' if all(r.passed for r in reports) else 'FAILED'}  worst relative error {worst:.1e}")

report = check_pipeline(0)
print(f"whole model under the detection loss: {'ok' if report.passed else 'FAILED'} ({report.overall_error:.1e})")
