"""Walk the hand-written gait over a stair course and print a depth scan.

Run with ``python demos/scripted_walk.py``; no training is involved.
"""
import numpy as np

from egoloco.evaluate import EvalConfig, eval_policy
from egoloco.gait import ScriptedGait
from egoloco.observe import HOLE, raycast_depth
from egoloco.sim import TerrainView, WalkerParams, WalkerState
from egoloco.terrain import generate_terrain


def main():
    cfg = EvalConfig(kinds=("flat", "stairs_up"), columns=(0, 3), episodes_per_column=2,
                     cap_s=20.0, randomize=False, pushes=False, obs_noise=False)
    for kind, res in eval_policy(ScriptedGait(), cfg).items():
        print(f"{kind:10s} displacement {res.displacement:6.2f} m   "
              f"time to fall {res.time_to_fall:5.1f} s")

    hf = generate_terrain("stairs_up", 0.6, seed=0)
    state = WalkerState.standing(1, x=1.0, ground=hf.height_at(1.0))
    scan = raycast_depth(state, TerrainView.single(hf, 1), WalkerParams.nominal(1))[0]
    shown = np.where(scan == HOLE, np.nan, scan)
    print("depth scan (m, nan = nothing within range):")
    print(np.array2string(shown, precision=2, max_line_width=100))


if __name__ == "__main__":
    main()
