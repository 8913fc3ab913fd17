"""Train small dense nets with and without the structural corrections.

Uses the Gaussian-cluster synthetic data so that it runs without CIFAR-10.
The plain affine net takes steps about |x|^2 + 1 times larger than the
corrected ones at the same eta, so each net is shown over an eta grid.
Run: python demos/synthetic_training.py
"""
from dataclasses import replace

from affine_divergence import experiment as X

base = X.ExperimentConfig(arch=(64, 32, 10), data="synthetic", synthetic_train=2000,
                          synthetic_test=500, epochs=5, batch_size=32, repeats=3)
train, test = X.load_data(base)

for norm in ("none", "affine_correction", "l2_half", "batchnorm"):
    for eta in (0.001, 0.01, 0.1):
        cfg = replace(base, normaliser=norm, eta=eta)
        try:
            final = X.summarize(X.run_repeats(cfg, train, test))[-1]
        except X.NonFiniteError:
            print(f"{norm:18s} eta {eta:<6g} diverged")
            continue
        print(f"{norm:18s} eta {eta:<6g} test accuracy {final['test_acc_mean']:6.2f} +- "
              f"{final['test_acc_se']:.2f} %  train loss {final['train_loss_mean']:.4f}")
