"""Loop-closure outliers with and without pairwise consistency checking.

Simulates the default circular trajectory, adds increasingly many false loop
closures and reports trajectory error for both configurations.

    python3 demos/robust_loop_closure.py
"""
from metrsem.pipeline import PipelineConfig, sweep


def main():
    rows = sweep(PipelineConfig(serial=True), [0.0, 0.2, 0.5, 0.8])
    print(f"{'outliers':>8}  {'loops':>5}  {'mode':>6}  {'accepted':>8}  {'bad kept':>8}  {'ATE [m]':>8}")
    for r in rows:
        print(f"{r['outlier_rate']:>8.1f}  {r['n_loops']:>5}  {r['pcm']:>6}  {r['n_accepted']:>8}  "
              f"{r['n_accepted_outliers']:>8}  {r['ate_rmse']:>8.4f}")


if __name__ == "__main__":
    main()
