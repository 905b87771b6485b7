"""One bell-shaped air pocket on a flat mold, end to end.

Run with ``python3 demos/single_pocket.py [out_dir]``. The scene is
synthetic, so the post-debulk "scan" is known exactly: the ply lies flat
at its consolidated thickness, which lets us compare the prediction with
the truth at the end.
"""

import sys

from debulk.pipeline import PipelineConfig, compare, run
from debulk.scanprep import build_heightmap
from debulk.synth import Pocket, SceneSpec, debulked_cloud, generate

out = sys.argv[1] if len(sys.argv) > 1 else None

# A 60 mm bump peaking at 6 mm. Noise-free, so we grid the cloud without
# the outlier and median filters.
spec = SceneSpec(width=200, height=200, pockets=[Pocket((100.0, 100.0), (60.0, 60.0), 6.0)])
scene = generate(spec, seed=0)
hm = build_heightmap(scene.ply, scene.ref)
t = scene.truth[0]
print(f"true pocket: area {t.area:.1f} cm^2, peak {t.peak:.2f} mm, excess length {t.excess[0]:.2f} mm along x")

config = PipelineConfig().updated({"mesh": {"target_node_count": 60}, "io": {"output_dir": out}})
result = run(hm, scene.ref, config)
print(result.table())

# A wide, gentle pocket: under vacuum the excess spreads over the patch
# instead of folding into a ridge, so the prediction sits just above the
# consolidated thickness and should agree with the flat ground truth.
cmp = compare(result.reports, debulked_cloud(spec), scene.ref)
print(cmp.table())
