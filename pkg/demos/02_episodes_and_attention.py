# %% [markdown]
# Pseudo-incremental episodes and what the adapter does with them.
# Rotated base classes stand in for "new" classes; the adapter rewrites
# every prototype using attention over the whole bank.

# %%
import numpy as np

from cecfscil.cec import adapt, attention_normalize, init_adapter, relation_coefficients
from cecfscil.datasets import sample_pseudo_episode, synth_blob_dataset
from cecfscil.encoder import Augment, EncoderConfig, embed, pretrain
from cecfscil.heads import init_from_data

np.set_printoptions(precision=3, suppress=True)

# %%
ds = synth_blob_dataset(12, 40, 10, 16, seed=0)
x = np.concatenate([ds.train[c] for c in range(12)])
y = np.repeat(np.arange(12), 40)
cfg = EncoderConfig(embed_dim=16, augment=Augment(crop_pad=1))
enc = pretrain(x, y, cfg, 10, seed=0)
print("train accuracy", enc.train_accuracy)

# %%
ep = sample_pseudo_episode(ds.train, way=3, shot=2, query=4, seed=5)
print("pseudo base classes", ep.base_classes)
print("rotated classes", ep.inc_classes, "angles", ep.angles)
print("their new labels", ep.synthetic_labels)

# %%
# one head per pseudo session, built from class means
bank = [init_from_data(embed(enc.params, ep.support_base, cfg), ep.support_base_labels),
        init_from_data(embed(enc.params, ep.support_inc, cfg), ep.support_inc_labels, session=1)]

adapter = init_adapter(16, seed=0, proj_scale=0.1, u_scale=0.05)
a = attention_normalize(relation_coefficients(adapter, bank))
print("attention over the 6 prototypes (rows sum to 1)")
print(a)

# %%
moved = [np.linalg.norm(n.weights - o.weights, axis=1) for n, o in zip(adapt(adapter, bank), bank)]
print("how far each prototype moved", np.concatenate(moved))
