"""Compare embedding stability under held-out stain shifts for encoders
trained with and without colour augmentation."""

import argparse
import dataclasses
import warnings

from nssl import experiments as X


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--policy", default="a1+gmm1")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--shifts", type=int, default=5)
    p.add_argument("--magnitude", type=float, default=0.15)
    p.add_argument("--encoder", default="tiny")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--steps-per-epoch", type=int, default=40)
    p.add_argument("--k", type=int, default=100)
    args = p.parse_args()
    base = X.RobustnessConfig()
    train = dataclasses.replace(base.train, encoder=args.encoder, epochs=args.epochs,
                                steps_per_epoch=args.steps_per_epoch)
    cfg = dataclasses.replace(base, n=args.n, policy=args.policy, seeds=tuple(args.seeds), shifts=args.shifts,
                              shift_magnitude=args.magnitude, k=args.k, train=train)

    def progress(seed, name, summ):
        print(f"seed {seed} {name}: overlap {summ['overlap'][0]:.4f} cosine {summ['cosine'][0]:.4f}", flush=True)

    warnings.simplefilter("ignore")
    print("\n".join(X.stain_robustness(cfg, progress).lines()))


if __name__ == "__main__":
    main()
