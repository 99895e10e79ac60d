"""The command line end to end, in a scratch directory.

Equivalent shell session:

    lesionuq generate --count 4 --out gen
    lesionuq uncertainty gen/scene_00{0,1,2,3} --out unc
    lesionuq evaluate gen/scene_00{0,1,2,3} --measures entropy,mi --retention 0.98 --out eval
    lesionuq train-toy --out toy
    lesionuq predict-toy --weights toy/weights.tnet --out pred

Run:  python demos/04_cli_pipeline.py
"""
import csv
import json
import os
import tempfile

from lesionuq.cli import main

scenes = [f"gen/scene_{i:03d}" for i in range(4)]
steps = [
    ["generate", "--count", "4", "--out", "gen"],
    ["uncertainty", *scenes, "--out", "unc"],
    ["evaluate", *scenes, "--measures", "entropy,mi", "--retention", "0.98", "--out", "eval"],
    ["train-toy", "--out", "toy"],
    ["predict-toy", "--weights", "toy/weights.tnet", "--out", "pred"],
]

with tempfile.TemporaryDirectory() as root:
    os.chdir(root)
    for argv in steps:
        code = main(argv)
        print(f"$ lesionuq {' '.join(argv)}  -> exit {code}")

    manifest = json.load(open("eval/manifest.json"))
    print("\neval/manifest.json:")
    print("  etas used:", manifest["config"]["etas_used"])
    for o in manifest["outputs"]:
        print(f"  {o['path']}  {o['bytes']} bytes  sha256 {o['sha256'][:12]}...")

    rows = [r for r in csv.DictReader(open("eval/roc.csv")) if r["bin"] == "all" and r["theta"] == "0.5"]
    print("\nroc.csv rows at theta 0.5, all lesions:")
    for r in rows:
        print(f"  {r['measure']:<8} eta {r['eta']:<22} TPR {float(r['tpr']):.3f}  "
              f"FDR {float(r['fdr']):.3f}  retention {float(r['retention']):.3f}")
    os.chdir("/")
