"""The compact-prior diffusion chain, from schedule to samples.

Shows the beta ramp and its terminal-noise guarantee, verifies the
forward-jump statistics against theory, and walks one reverse chain
two ways: with a bare fresh denoiser (the chain is a pure rescale and
amplifies its start state by 1/sqrt(alpha_bar_T), which is what made
early training diverge) and with the schedule-aware skip (the fresh
chain is the exact identity, so training starts from a neutral prior).
"""

import numpy as np

from udcfer import autodiff as ad
from udcfer import diffusion as df
from udcfer.config import ModelConfig
from udcfer.errors import ConfigError
from udcfer.nn import ParamStore


def main():
    print("== schedule ==")
    s = df.make_schedule(4, 0.3, 0.999)
    print(f"{'t':>2s} {'beta':>8s} {'alpha':>8s} {'alpha_bar':>10s}")
    for t in range(4):
        print(f"{t + 1:>2d} {s.beta[t]:>8.4f} {s.alpha[t]:>8.4f} "
              f"{s.alpha_bar[t]:>10.2e}")
    print(f"terminal alpha_bar {s.alpha_bar[-1]:.2e} <= 1e-4: the forward jump"
          "\nreplaces the prior with (almost) pure noise, so inference can"
          "\nstart from a state that contains no label information.\n")

    try:
        df.make_schedule(4, 0.3, 0.5)
    except ConfigError as e:
        print(f"a too-shallow ramp is rejected:\n  {e}\n")

    print("== forward jump statistics (100k draws) ==")
    z = ad.constant(np.full((100_000, 2), 1.5))
    out = df.forward_diffuse(z, s, rng=np.random.default_rng(0)).data
    ab = s.alpha_bar[-1]
    print(f"column means {out.mean(axis=0)} vs sqrt(ab)*z = {np.sqrt(ab) * 1.5:.5f}")
    print(f"column vars  {out.var(axis=0)} vs 1 - ab    = {1 - ab:.5f}\n")

    print("== reverse chain with a fresh denoiser ==")
    cfg = ModelConfig(d_label=8, d_image=8, epr_dim=4, channels=(4, 6, 8),
                      fpen_hidden=8, fpen_layers=2, time_dim=8,
                      denoiser_hidden=16)
    store = ParamStore(seed=0)
    df.init_denoiser(store, cfg)
    z_T = np.array([[0.02, -0.01, 0.005, 0.0]])
    cond = ad.constant(np.zeros((1, 4)))

    print("bare MLP denoiser (no schedule skip):")
    den = df.make_denoiser(store, cfg)
    z = ad.constant(z_T)
    for t in range(4, 0, -1):
        z = df.reverse_step(z, t, cond, s, den)
        print(f"  after step t={t}: {np.round(z.data[0], 5).tolist()}")
    print(f"  z_T / sqrt(alpha_bar_T) = "
          f"{np.round(z_T[0] / np.sqrt(ab), 5).tolist()}")
    print("  a fresh chain amplifies its start state >100x; feeding that")
    print("  into the trunk modulation is what made stage 2 diverge.\n")

    print("denoiser with the fixed kappa_t skip (the training setup):")
    den = df.make_denoiser(store, cfg, schedule=s)
    z = ad.constant(z_T)
    for t in range(4, 0, -1):
        z = df.reverse_step(z, t, cond, s, den)
        print(f"  after step t={t}: {np.round(z.data[0], 5).tolist()}")
    print("  the skip cancels the rescale exactly, so an untrained chain is")
    print("  the identity and training only learns the residual refinement.\n")

    print("== variant flags ==")
    from udcfer.harness import VARIANTS
    for name, flags in VARIANTS.items():
        print(f"{name}: {flags}")
    print("\nV1 feeds the conditional vector straight to the classifier;")
    print("V2 adds the chain; V3 adds prior distillation and noise;")
    print("V4 is V3 with the deterministic (noise-free) chain.")


if __name__ == "__main__":
    main()
