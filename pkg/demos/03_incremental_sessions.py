"""Class-incremental sessions: base rows never change, one novel class arrives per session.

Takes about 15 seconds. Run: python demos/03_incremental_sessions.py
"""

from dataclasses import replace

from gfss.pipeline import Dataset, cifss_table, desk_config, run_cifss, session_plan, train_model
from gfss.synthgen import make_world, sample_eval_set, sample_supports

# %% Five novel classes, the same base classes as the default world.
cfg = desk_config()
world = make_world(replace(cfg.world, n_novel=5))
feats, labels = sample_eval_set(world, cfg.run.eval_images)
ds = Dataset(world, feats, labels, {c: sample_supports(world, c) for c in world.novel_ids})

model = train_model(world, cfg.train)
plan = session_plan(world.novel_ids, sessions=5)
print("session plan:", plan)

# %% Each session is scored on images of the classes seen so far.
reg, results = run_cifss(ds, model, cfg.infer, plan)
print(cifss_table(results))

same = reg.bank.base_rows.tobytes() == model.bank.kernels.tobytes()
print("base rows bit-identical after all sessions:", same)
