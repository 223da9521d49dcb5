"""Communication overhead of the four CFFL variants at full scale.

    python demos/overhead.py
"""

from cffl import metrics

inp = metrics.OverheadInputs(K=10, W_FL=8_428_416, W_HFL=4_214_208, E=5, T=100, O=1, A=1, P=1, C_max=3)
print(f"{'algo':<10}{'per round':>14}{'per epoch':>16}{'total':>18}{'A':>5}{'P':>5}")
for algo in metrics.ALGOS:
    o = metrics.comm_overhead(algo, inp)
    print(f"{algo:<10}{o.per_round:>14,}{o.per_epoch:>16,}{o.total:>18,}{o.action_payload:>5}{o.policy_payload:>5}")
print(f"flops saving of the heterogeneous model: {100 * metrics.improvement(9.337044992e9, 7.806124032e9):.2f}%")
