"""Closed-form cost accounting and the single-block timing harness.

Counts use 2 FLOPs per multiply-accumulate with softmax, norms, and biases
excluded. At the ViT-Large-like shape (d=1024, 16 heads, 24x24 tokens) the
single-block table shows why the depthwise path wins: the full-convolution
fold inflates FLOPs 2x over attention, the depthwise split cuts them 2.5x,
and block ensembling another 16x.
"""

from dwdropin import vit
from dwdropin.cost import (
    bench,
    budget_sweep,
    model_cost_report,
    variant_table_text,
)
from dwdropin.select import SelectionPlan

print("single-block costs at the ViT-Large-like shape:")
print(variant_table_text(vit.VITL))

# Whole-model pricing for a 12-of-24 blockwise depthwise plan.
plan = SelectionPlan(mode="blockwise", order="lowest", budget=12,
                     targets=tuple(range(12)))
rep = model_cost_report(vit.VITL, plan, "dw")
print(f"\n12/24 blocks depthwise: model FLOPs x{rep.deltas['flops_ratio']:.4f} "
      f"({rep.deltas['flops_reduction_pct']:.2f}% saved); attention path on "
      f"replaced blocks shrinks {rep.deltas['attn_reduction_pct_replaced']:.1f}%")

# FLOPs fall monotonically as the blockwise budget grows.
print("\nbudget  total GFLOPs  reduction")
for row in budget_sweep(vit.VITL, "dw")[::6]:
    print(f"{row['budget']:>6}  {row['flops'] / 1e9:>12.2f}  "
          f"{row['flops_reduction_pct']:>8.2f}%")

# Wall-clock ordering on this machine (absolute numbers are hardware-bound;
# the ordering is the meaningful part).
from dwdropin.cli import single_block_bench_fns
from dwdropin.tensor import seeded_fill

fns = single_block_bench_fns(vit.VITL, seed=0)
x = seeded_fill((vit.VITL.n, vit.VITL.d), 1, "gaussian")
print("\nsingle-block timings (median of 20 reps):")
for v in ("mhsa", "dw", "ens-dw"):
    r = bench(fns[v], x, warmup=2, reps=20)
    print(f"  {v:<8} {r['median'] * 1e3:8.2f} ms   [p10 {r['p10'] * 1e3:.2f}, "
          f"p90 {r['p90'] * 1e3:.2f}]")
