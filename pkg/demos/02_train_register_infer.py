"""Train the head, freeze it, register two novel classes from one shot each, evaluate.

Takes about 15 seconds. Run: python demos/02_train_register_infer.py
"""

from dataclasses import replace

from gfss.pipeline import build_dataset, desk_config, run_gfss, train_model

# %% Default world with a 500-step budget.
cfg = desk_config()
ds = build_dataset(cfg)
print("base ids:", ds.world.base_ids, "novel ids:", ds.world.novel_ids)

# %% Training sees base classes only; the log holds one JSON line per step.
model = train_model(ds.world, cfg.train)
print("trained steps:", model.trained_steps)

# %% Registration appends shot-averaged masked features as new kernel rows.
variants = {
    "full": cfg.infer,
    "no bias": replace(cfg.infer, use_cbbi=False),
    "no bias, no refresh": replace(cfg.infer, use_cbbi=False, use_pkl_update=False),
}
for name, icfg in variants.items():
    reg, rep = run_gfss(ds, model, icfg, tag=name)
    print(f"{name:>20}: mIoU base {rep.miou_base:.3f}  novel {rep.miou_novel:.3f}  hIoU {rep.hiou:.3f}")

print("registered rows:", reg.bank.class_ids, "sessions:", reg.bank.sessions)
