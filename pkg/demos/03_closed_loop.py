"""Print, measure, learn, recommend, and check against the simulator's truth.

Run: python3 demos/03_closed_loop.py   (about ten seconds)
"""
# %%
from amprotocol.phantom import DefectModel, design_d1
from amprotocol.pipeline import closed_loop

result = closed_loop(design_d1(2.0), DefectModel(), seed=0)
rec, report = result.recommendation, result.report

# %% Five best settings by predicted closeness to the designed porosity.
print(f"designed porosity {rec.designed:.4f} %\n")
print("height  speed  printer  predicted %  deviation")
for c in rec.table[:5]:
    h, s, _, p = c.params.as_tuple()
    print(f"{h:6g} {s:6g} {p:8d} {c.predicted:12.4f} {c.deviation:10.4f}")

# %% The winner against the exhaustive scan of true porosity.
print(f"\nwinner {report.winner.as_tuple()} true porosity {report.winner_true:.4f} %")
print(f"true optimum {report.true_best.as_tuple()}, match: {report.matches}")
print(f"relative error of the winner {report.relative_error:.3%}")
