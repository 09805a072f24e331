import time, numpy as np
from scipy import ndimage
from exactmil import config as C, experiment as X, network as net, pipelines as pl, evalstats as ev
cfg = C.load(env={})
train, test = X.phantom_splits(cfg)
model, _ = net.load_checkpoint("/tmp/pilot/model.exck")
loc = X.localization_metrics(model, test, cfg.schema)
print("AUPR", loc["mean_aupr"], "DSC", loc["mean_dsc"], flush=True)
# boundary analysis: ignore a 1-voxel shell around lesions
ap_ign = []
for c in test:
    g = c.lesion_union > 0
    if not g.any(): continue
    amap, _ = pl.zero_shot_localize(model(c.image), cfg.schema)
    shell = ndimage.binary_dilation(g) & ~g
    keep = ~shell
    ap_ign.append(ev.aupr(amap[keep], g[keep]))
print("AUPR ignoring 1-voxel shell", np.mean(ap_ign), flush=True)
t = time.time()
d = X.zero_shot_diagnosis(model, train, test, cfg.schema)
print("diag", d["macro_auroc"], d["macro_f1"], d["f1"], d["pair_ordering"], time.time() - t, flush=True)
t = time.time()
seg, losses = pl.finetune_seg(model, cfg.schema, train[:30], cfg.weights, cfg.finetune)
g = X.segmentation_gain(model, seg, test, cfg.schema, 0.2)
print("seg", g["mean_zero_shot"], g["mean_finetuned"], losses, time.time() - t, flush=True)
t = time.time()
clf, cl = pl.train_aamap_classifier(model, train, cfg.schema, cfg.classifier)
print("cls", X.classifier_auroc(clf, model, test, cfg.schema), cl[-3:], time.time() - t, flush=True)
