"""Train MoCo v3 on the synthetic nucleus set and compare linear probes.

Prints balanced accuracy for the trained encoder, a frozen random encoder and
an oracle probe on the generative parameters.
"""

import argparse
import dataclasses
import warnings

from nssl import experiments as X


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--encoder", default="tiny")
    p.add_argument("--policy", default="a1-nocolor")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--steps-per-epoch", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--branch", choices=("student", "teacher"), default="student")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    base = X.SignalConfig()
    train = dataclasses.replace(base.train, encoder=args.encoder, policy=args.policy, epochs=args.epochs,
                                steps_per_epoch=args.steps_per_epoch, base_lr=args.lr, seed=args.seed,
                                workers=args.workers)
    cfg = dataclasses.replace(base, n=args.n, branch=args.branch, train=train)

    def progress(step, res):
        if step % 100 == 0:
            print(f"step {step}  loss {res.loss:.4f}  per-dim std {res.per_dim_std:.4f}", flush=True)

    warnings.simplefilter("ignore")
    print("\n".join(X.ssl_signal(cfg, progress).lines()))


if __name__ == "__main__":
    main()
