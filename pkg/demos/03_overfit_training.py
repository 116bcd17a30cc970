# Train on four phantoms and watch the scar Dice climb.
#
# This is the end-to-end smoke test of the method: if the boundary-gated
# two-branch network cannot memorise four small volumes, something is wrong.
# Defaults follow the recipe (SGD, momentum 0.99, lr 0.01 decaying 5% per
# epoch, batch 2, augmentation on). Pass a step count to make it shorter:
#
#     python3 demos/03_overfit_training.py 60

import sys
import time

from mdbanet.network import NetworkConfig, build_network, count_parameters
from mdbanet.phantom import PhantomSpec, generate_phantom
from mdbanet.training import TrainConfig, evaluate_cases, train_on_cases

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
epochs = max(1, steps // 50)

cases = [generate_phantom(PhantomSpec(seed=s)) for s in range(4)]
cfg = TrainConfig(max_epochs=epochs, steps_per_epoch=steps // epochs, seed=0)

for method in ("MDBAnet", "MDnet"):
    net = build_network(NetworkConfig(base_channels=8).for_method(method), seed=0)
    print("%s: %d trainable parameters" % (method, count_parameters(net)))
    before = evaluate_cases(net, cases).aggregates["ds_scar"].mean
    t0 = time.time()
    result = train_on_cases(net, cases, cfg)
    losses = result.losses()
    ev = evaluate_cases(net, cases)
    print("  loss  first 10 steps %.3f   last 10 steps %.3f" % (losses[:10].mean(), losses[-10:].mean()))
    print("  scar DS %.3f -> %s   LA DS %s   (%.0f s)"
          % (before, ev.aggregates["ds_scar"].format(3), ev.aggregates["ds_la"].format(3), time.time() - t0))
