"""
Three cellular automata
=======================

Roll one episode of each environment, count the cells in each state over
time and write a few frames as PPM images.

    python demos/simulators.py [--quick] [--out demo_out]
"""

import sys
from pathlib import Path

import numpy as np

from arnca.grid import STATE_NAMES
from arnca.render import state_image, write_ppm
from arnca.sim import simulate_chunk

quick = "--quick" in sys.argv
out = Path(sys.argv[sys.argv.index("--out") + 1]) if "--out" in sys.argv else Path("demo_out")
n, T = (16, 12) if quick else (64, 60)

# forest fire: trees ignite once the heat passed on by burning neighbours
# crosses a threshold; fire turns to ember and cools off
forest = simulate_chunk("forest", "det", n, T, seed=1)

# host-pathogen and stock market only come in a stochastic flavour
host = simulate_chunk("host", "stoch", n, min(T, 30), seed=2)
stock = simulate_chunk("stock", "stoch", n, min(T, 30), seed=3)

for chunk in (forest, host, stock):
    names = STATE_NAMES[chunk.env]
    counts = np.stack([np.bincount(f.states.ravel(), minlength=4) for f in chunk.frames])
    print(f"\n{chunk.env.label}: {chunk.T} frames of {chunk.n}x{chunk.n}")
    print("   t  " + "  ".join(f"{name:>8}" for name in names) + "    target")
    for t in range(0, chunk.T, max(1, chunk.T // 6)):
        row = "  ".join(f"{c:8d}" for c in counts[t])
        print(f"{t:4d}  {row}  {chunk.masks()[t].mean():8.3f}")
    # first, middle and last frame in palette colours
    for t in (0, chunk.T // 2, chunk.T - 1):
        write_ppm(out / f"{chunk.env.label}_{t:03d}.ppm", state_image(chunk.frames[t].states, chunk.env))

print(f"\nimages in {out}/")
