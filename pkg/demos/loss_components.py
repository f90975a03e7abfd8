"""How the three loss terms react to a prediction drifting away from the truth.

Prints L_ld, L_exp and L_smooth for a DS truth at 4.0 while the predicted
distribution moves, widens and gets jagged.

    python3 demos/loss_components.py
"""

import numpy as np

from dldlscore.labeldist import LabelDistribution, LabelSpace, normal_pmfs, total_loss

space = LabelSpace(-0.5, 10.5, 89)
truth = LabelDistribution(normal_pmfs(4.0, 0.6, space), space)


def show(label, pmf):
    b = total_loss(truth, LabelDistribution(pmf / pmf.sum(), space))
    print(f"{label:<28} ld {b.ld:8.4f}  exp {b.exp:8.4f}  smooth {b.smooth:8.4f}  total {b.total:8.4f}")


print("truth: DS 4.0, sigma 0.6\n")
for mu in (4.0, 4.5, 5.0, 7.0):
    show(f"normal at {mu}, sigma 0.6", normal_pmfs(mu, 0.6, space))
print()
for sigma in (0.3, 1.2, 2.4):
    show(f"normal at 4.0, sigma {sigma}", normal_pmfs(4.0, sigma, space))
print()
# every other bin nearly emptied: mean and spread barely move, so L_exp stays near 0
# while the smoothness term jumps
jagged = normal_pmfs(4.0, 0.6, space) * np.tile([1.9, 0.1], 45)[:89]
show("jagged normal at 4.0", jagged)
show("one-hot at 4.0", np.eye(89)[np.argmin(np.abs(space.bin_centers - 4.0))])
