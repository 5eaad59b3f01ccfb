"""
Scene regions and the hierarchical classifier
=============================================

Generate a synthetic scene, split it into regions with a k-means tree,
and train the classifier that maps descriptors to region labels.
"""

import numpy as np

from regionloc import classifier as clf
from regionloc import harness

cfg = harness.ExperimentConfig()
cfg.scene.train_views = 8
cfg.scene.query_views = 0
cfg.scene.label_stride = 4

scene, train, _ = harness.synth_views(cfg)
print(f"scene seed {scene.seed}: {len(scene.points)} points, {len(train)} training views")

# m branches per level, n levels, q centers per leaf
tree = harness.make_tree(cfg, train, cfg.camera)
print(f"tree: {tree.n_leaves} leaves out of {cfg.tree.m ** cfg.tree.n} possible")
print(f"mean leaf radius {tree.mean_leaf_radius():.3f}")

# each pixel of each view gets a descriptor and the labels of its region
provider = harness.make_descriptor_provider(cfg)
data = harness.labeled_dataset(tree, train, provider, cfg.camera, cfg.scene.label_stride)
print("labeled pixels:", sum(len(d) for d, _ in data))

params = clf.init_params(cfg.descriptors.dim, cfg.tree.m, cfg.tree.n, cfg.classifier.hidden, seed=0)
first_loss, _ = clf.loss_and_grad(params, *data[0])
print(f"loss before training {first_loss:.4f} (n ln m = {cfg.tree.n * np.log(cfg.tree.m):.4f})")

res = clf.train_fast(params, data, clf.TrainConfig(600, cfg.classifier.learning_rate, seed=0), target_accuracy=0.9)
print(f"90% region accuracy after {res.reached_at} iterations")
print(f"final loss {res.losses[-1]:.4f}, accuracy {clf.accuracy(res.params, data):.3f}")

levels, composite = clf.predict(res.params, data[0][0][:5])
print("per-level labels:\n", levels)
print("composite region ids:", composite)
