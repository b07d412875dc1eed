# %% [markdown]
# The desk-scale benchmark: 20 synthetic classes, 12 in the base session,
# then 4 sessions of 2-way 5-shot. We compare the decoupled cosine
# baseline with the same pipeline plus a trained adapter, and the
# decoupled linear head against joint finetuning (forgetting).

# %%
from cecfscil.config import DESK_CONFIG, RunConfig
from cecfscil.harness import build_dataset, build_split, pretrain_encoder, run_pipeline

seed = 1
cfg = RunConfig.from_dict(DESK_CONFIG)
split = build_split(cfg, build_dataset(cfg, seed), seed)
pre = pretrain_encoder(cfg, split, seed)


def show(name, res):
    accs = " ".join(f"{100 * a:6.2f}" for a in res.metrics.accuracies)
    print(f"{name:<22}{accs}   avg {100 * res.metrics.avg:.2f}  pd {100 * res.metrics.pd:.2f}")


# %%
show("cosine baseline", run_pipeline(cfg.with_overrides({"run.adapter": False}), seed, pre, split))
show("cosine + adapter", run_pipeline(cfg, seed, pre, split))

# %%
linear = {"run.head": "linear", "run.adapter": False, "run.data_init": False,
          "run.fit_epochs": 100, "run.fit_lr": 0.1}
show("linear, decoupled", run_pipeline(cfg.with_overrides(linear), seed, pre, split))
show("linear, joint finetune",
     run_pipeline(cfg.with_overrides({**linear, "run.decoupled": False}), seed, pre, split))
