"""Fit one simulated panel along the penalty path and show each step.

    python scripts/penalty_path_demo.py --seed 3
"""

import argparse

from panelnn.inference import infer, parametric_ci
from panelnn.network import Architecture
from panelnn.panel_data import temporal_split
from panelnn.simulation import DGPConfig, fit_fe_ols, generate_panel
from panelnn.training import FitConfig, lambda_path


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sim = generate_panel(DGPConfig(seed=args.seed))
    train, test, val = temporal_split(sim.data)
    model, trace = lambda_path(train, test, Architecture((12, 11, 10, 9), 1, 5), FitConfig(seed=args.seed))
    print(f"{'lambda':>10} {'test MSE':>10} {'penalised norm':>15} {'epochs':>7}")
    for step in trace:
        mark = " <" if step.lam == model.lam else ""
        print(f"{step.lam:10.4g} {step.test_mse:10.2f} {step.penalized_norm_sq:15.4g} {step.epochs:7d}{mark}")
    ci = parametric_ci(model, infer(model, train).cov)[0]
    fe = fit_fe_ols(train, val)
    print(f"validation MSE: network {model.mse(val):.1f}, fixed-effects OLS {fe.val_mse:.1f}")
    print(f"beta = {ci.point:.3f} (se {ci.se:.3f}, 95% CI [{ci.lower:.3f}, {ci.upper:.3f}]), true value 1")


if __name__ == "__main__":
    main()
