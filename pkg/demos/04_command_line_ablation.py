# The whole pipeline through the command-line interface.
#
# Writes phantoms, computes the scar table, runs the fusion ablation
# (Sobel gate, plain multiplication, scar branch alone) from one config file,
# then predicts, evaluates and draws contour overlays for the Sobel model.
# Everything lands in ./mdbanet_demo_run.

import json
import pathlib
import shutil

from mdbanet.cli import main

root = pathlib.Path("mdbanet_demo_run")
shutil.rmtree(root, ignore_errors=True)

def run(*argv):
    print("$ mdbanet", " ".join(argv))
    code = main(list(argv))
    assert code == 0, code

run("phantom", "--out", str(root / "data"), "--n-cases", "6", "--n-train", "4", "--seed", "0")
run("stats", "--manifest", str(root / "data/manifest.json"), "--out", str(root / "stats"), "--connectivity", "all")

config = {
    "manifest": "data/manifest.json",
    "output_dir": "ablation",
    "seed": 0,
    "methods": ["MDBAnet", "MDBAnet_mul", "MDnet"],
    "network": {"encoder_depth": 3, "sub_decoders": 2, "base_channels": 8},
    "train": {"max_epochs": 2, "steps_per_epoch": 20},
}
(root / "ablation.json").write_text(json.dumps(config, indent=2))
run("ablation", "--config", str(root / "ablation.json"))

sobel = root / "ablation" / "MDBAnet"
run("predict", "--checkpoint", str(sobel / "best.pt"), "--manifest", str(root / "data/manifest.json"),
    "--out", str(root / "pred"), "--split", "eval")
run("evaluate", "--manifest", str(root / "data/manifest.json"), "--predictions", str(root / "pred"),
    "--out", str(root / "eval"), "--method", "MDBAnet")
run("report", "--predictions", str(root / "pred"), "--manifest", str(root / "data/manifest.json"),
    "--out", str(root / "figures"), "--slices", "auto:2", "--zoom", "6")

print()
print((root / "ablation" / "summary.csv").read_text())
print("overlays:", sorted(p.name for p in (root / "figures").glob("*.png")))
