"""
End-to-end localization
=======================

The same stages the command line runs, driven from Python on a small
scene: generate views, build the tree, train, localize and evaluate.
The equivalent shell session is

    regionloc gen-scene --out run
    regionloc build-tree --out run
    regionloc train --out run
    regionloc localize --out run
    regionloc eval --out run
"""

import json
import tempfile

from regionloc import harness

cfg = harness.ExperimentConfig()
cfg.scene.train_views = 10
cfg.scene.query_views = 4
cfg.classifier.iterations = 600

out = tempfile.mkdtemp(prefix="regionloc_demo_")
harness.gen_scene(cfg, out)
tree = harness.build_tree_stage(cfg, out)
result, acc = harness.train_stage(cfg, out)
print(f"{tree.n_leaves} leaves, classifier accuracy {acc:.3f}")

# ground-truth region labels skip the classifier and show what the geometry alone can do
oracle = harness.localize_stage(cfg, out, mode="oracle-labels")
learned = harness.localize_stage(cfg, out)

for name, rep in (("oracle labels", oracle), ("classifier", learned)):
    print(f"{name:>14}: median {rep.median_translation:.3f} units / {rep.median_rotation:.2f} deg,",
          "success", json.dumps(rep.success_rates))

print("per query (classifier):")
for row in learned.rows:
    print(f"  #{row['index']}: {row['translation_error']:.3f} units, {row['inliers']} inliers, {row['time_ms']:.0f} ms")
print("outputs in", out)
