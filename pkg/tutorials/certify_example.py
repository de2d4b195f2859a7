"""Certify the logarithmic-potential example and inspect a failing certificate.

Run with ``python3 tutorials/certify_example.py``.
"""

import dataclasses

from levinson import Grid, builtin, default_certificate, verify_hypotheses, verify_khasminskii

sys = builtin("example-4.1", n=2)
cert = default_certificate(sys)
print(cert)

grid = Grid(radii=tuple(float(r) for r in range(1, 11)), sphere_res=256, t_samples=64)
report = verify_hypotheses(sys, cert, grid)
print(report.summary())

# Khasminskii limits are judged on joint (x, y) shells; larger shells give Psi room to grow.
outer = Grid(radii=(4.0, 8.0, 12.0, 16.0, 20.0), sphere_res=256, t_samples=32)
print(verify_khasminskii(sys, cert, outer).summary())

# Lowering M breaks the dissipativity bound; the report names a witness point.
weak = dataclasses.replace(cert, M=1.0)
h3 = verify_hypotheses(sys, weak, grid)["H3"]
print("H3 with M = 1:", "pass" if h3.passed else "fail", "margin", h3.margin, "at", h3.witness)
