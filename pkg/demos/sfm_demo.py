"""Unordered structure from motion on a synthetic scene with distractor frames.

Images from unrelated viewpoints are mixed into a regular capture.  The
demo reports cluster sizes and the frames left unregistered, followed by
pose accuracy over the registered frames.

    python demos/sfm_demo.py [--frames 100] [--outliers 4] [--seed 0]
"""

import argparse

from ffrecon import OracleConfig, SfmConfig, SyntheticPredictor, relpose_accuracy, run_sfm, synth_scene


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--outliers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    cfg = OracleConfig(seed=a.seed, n_frames=a.frames, n_outlier_frames=a.outliers)
    scene = synth_scene(cfg)
    result = run_sfm(scene.all_frame_ids, SyntheticPredictor(scene, cfg), SfmConfig())
    print(f"cluster sizes {result.clusters.sizes()}")
    print(f"keyframe refinement order {result.refine_order}")
    print(f"unregistered {sorted(result.unregistered)} (distractors {sorted(scene.outlier_ids)})")

    traj = result.map.metric_trajectory()
    ids = sorted(f for f in traj if f not in scene.outlier_ids)
    rel = relpose_accuracy([traj[i] for i in ids], [scene.poses[i] for i in ids])
    for t, v in rel.rra_at.items():
        print(f"RRA@{t} {100 * v:.1f}%  RTA@{t} {100 * rel.rta_at[t]:.1f}%")
    print(f"AUC@30 {rel.auc30:.1f}")


if __name__ == "__main__":
    main()
