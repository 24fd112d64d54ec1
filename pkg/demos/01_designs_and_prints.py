"""Designed porosity, rasterized porosity, and what the printers add on top.

Run: python3 demos/01_designs_and_prints.py
"""
# %%
from amprotocol.metrology import connected_components, porosity, size_histogram
from amprotocol.phantom import (
    DefectModel,
    ProcessParams,
    build_design,
    design_d1,
    design_d2,
    designed_porosity,
    simulate_print,
    surface_voxel_bound,
    reference_params,
    true_porosity,
)

# %% Two procedural designs at full height. The mask porosity stays within
# the rasterization bound of the analytic value.
for spec in (design_d1(), design_d2()):
    _, mask = build_design(spec)
    print(
        f"{spec.name}: {len(spec.voids)} voids, designed {designed_porosity(spec):.4f} %, "
        f"mask {porosity(mask).phi:.4f} %, bound +-{surface_voxel_bound(spec):.3f}"
    )

# %% Desk-scale D1 printed with every reference setting on the three printers.
spec = design_d1(2.0)
model = DefectModel()
print("\nprinter  height  speed   true %   measured %")
for p in reference_params():
    _, mask = simulate_print(spec, p, model, seed=0)
    print(f"{p.printer:>7} {p.layer_height:>7g} {p.nozzle_speed:>6g} {true_porosity(spec, p, model):8.3f} {porosity(mask).phi:11.3f}")

# %% Void size distribution of one print (equivalent diameters in mm).
_, mask = simulate_print(spec, ProcessParams(70, 35, 100, 11), model, seed=0)
stats = connected_components(mask)
edges = [0.05, 0.1, 0.2, 0.3, 0.5]
print("\nvoids:", len(stats.components))
print("diameter bins", ["<0.05"] + [f"{a}-{b}" for a, b in zip(edges, edges[1:])] + [">=0.5"])
print("counts       ", size_histogram(stats, edges).tolist())
