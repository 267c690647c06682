"""
Learning a forest fire
======================

Train AR-NCA on deterministic forest fires, compare it with repeating the
last observed frame, then reuse the same weights on a grid four times wider.

    python demos/forest_training.py [--quick] [--out demo_out]

The full run (20 chunks, 300 epochs) takes about 20 minutes on one core.
"""

import sys
import time
from pathlib import Path

from arnca.render import render_chunk
from arnca.sim import chunk_seed, simulate_chunk
from arnca.training import PersistencePredictor, TrainConfig, evaluate, scale_transfer_eval, train

quick = "--quick" in sys.argv
out = Path(sys.argv[sys.argv.index("--out") + 1]) if "--out" in sys.argv else Path("demo_out")
n, T, t_obs = (12, 20, 6) if quick else (32, 60, 10)
n_train, epochs = (4, 3) if quick else (20, 300)

train_chunks = [simulate_chunk("forest", "det", n, T, seed=chunk_seed(100, k)) for k in range(n_train)]
test_chunks = [simulate_chunk("forest", "det", n, T, seed=chunk_seed(200, k)) for k in range(4 if quick else 10)]

# the model sees frames 0..t_obs-1 and must roll the fire forward on its own
config = TrainConfig(model="arnca", t_obs=t_obs, t_pred=T, epochs=epochs, u=16 if not quick else 4)
clock = time.perf_counter()
result = train(config, train_chunks,
               progress=lambda row: row["epoch"] % 25 == 24 and print(f"epoch {row['epoch'] + 1}: loss {row['loss']:.4f}"))
print(f"trained {result.model.params.count()} parameters in {time.perf_counter() - clock:.0f} s")

model_report = evaluate(result.model, test_chunks, t_obs, T)
persist_report = evaluate(PersistencePredictor(), test_chunks, t_obs, T)
print(f"AR-NCA      F1 {model_report.f1_mean:.3f}  AUC {model_report.auc_mean:.3f}")
print(f"persistence F1 {persist_report.f1_mean:.3f}  AUC {persist_report.auc_mean:.3f}")

# every cell runs the same update, so the weights apply to any grid size
big = [simulate_chunk("forest", "det", 4 * n, T, seed=chunk_seed(200, k)) for k in range(2 if quick else 5)]
transfer = scale_transfer_eval(result.model, big, t_obs, T, n_train=n)
print(f"{n}->{4 * n}   F1 {transfer.f1_mean:.3f}")

result.model.save(out / "forest_arnca.arnp")
maps = result.model.predict(test_chunks[:1], t_obs, T)[0]
render_chunk(test_chunks[0], out / "forest_renders", maps, t_obs, overlay=True)
print(f"checkpoint and renders in {out}/")
